"""Binary PGM/PPM image I/O and the box-region statistics behind objectness cues.

Everything here is a pure function of its inputs; callers may fan work out
across frames freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Malformed or unsupported PGM/PPM payload."""


@dataclass
class Image:
    """8-bit image; pixels shaped (h, w) for grayscale or (h, w, 3) for color."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if not (px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 3)):
            raise ValueError(f"unsupported pixel shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


def _read_header_token(data: bytes, pos: int, path: Path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n and data[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError(f"{path}: truncated header")
    return data[start:pos], pos


def load_image(path: str | Path) -> Image:
    """Load a binary PGM (P5) or PPM (P6) file with max value 255."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image file: {path}")
    data = path.read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: bad magic {magic!r}, want P5 or P6")
    channels = 1 if magic == b"P5" else 3

    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos, path)
        try:
            fields.append(int(token))
        except ValueError:
            raise ImageFormatError(f"{path}: non-numeric header field {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported max value {maxval}, want 255")

    pos += 1  # exactly one whitespace byte separates header from payload
    expected = width * height * channels
    payload = data[pos : pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(
            f"{path}: truncated payload, got {len(payload)} of {expected} bytes"
        )
    px = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Image(px.reshape(shape).copy())


def save_image(img: Image, path: str | Path) -> None:
    """Write as binary PGM/PPM depending on channel count."""
    path = Path(path)
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    path.write_bytes(header + img.pixels.tobytes())


def luminance(img: Image | np.ndarray) -> np.ndarray:
    """Single-channel float64 view; color collapses with the 0.299/0.587/0.114 weights."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    if px.ndim == 2:
        return px.astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * px[:, :, 0] + g * px[:, :, 1] + b * px[:, :, 2]


def integral_table(values: np.ndarray) -> np.ndarray:
    """(h+1, w+1) cumulative-sum table; rectangle sums via the 4-corner formula."""
    h, w = values.shape
    table = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(values, axis=0, dtype=np.float64, out=table[1:, 1:])
    np.cumsum(table[1:, 1:], axis=1, out=table[1:, 1:])
    return table


def integral_image(img: Image) -> np.ndarray:
    if img.channels != 1:
        raise ValueError("integral_image requires a single-channel image")
    return integral_table(img.pixels)


def rect_sum(table: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> float:
    """Sum over the half-open pixel rectangle [x0, x1) x [y0, y1)."""
    if x1 <= x0 or y1 <= y0:
        return 0.0
    return float(table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0])


def rect_sums(table: np.ndarray, x0, y0, x1, y1) -> np.ndarray:
    """Vectorized rect_sum over index arrays; empty rectangles contribute 0."""
    x0 = np.asarray(x0, dtype=np.int64)
    y0 = np.asarray(y0, dtype=np.int64)
    x1 = np.asarray(x1, dtype=np.int64)
    y1 = np.asarray(y1, dtype=np.int64)
    total = table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]
    return np.where((x1 > x0) & (y1 > y0), total, 0.0)


_SOBEL_NOTE = "3x3 Sobel pair, borders clamped to the edge pixel"


def gradient_magnitude(img: Image | np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude (float64); color input goes through luminance first."""
    gray = luminance(img)
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) - (
        p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    )
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) - (
        p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    )
    return np.hypot(gx, gy)


def region_histogram(img: Image, rect: tuple[int, int, int, int], bins: int = 16) -> np.ndarray:
    """Normalized per-channel histogram of a pixel rectangle (x0, y0, w, h).

    Bins are uniform in [0, 256) with width 256/bins; channels concatenate,
    so the result has channels*bins entries summing to 1.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    x0, y0, rw, rh = rect
    if rw <= 0 or rh <= 0:
        raise ValueError("zero-area histogram rectangle")
    if x0 < 0 or y0 < 0 or x0 + rw > img.width or y0 + rh > img.height:
        raise ValueError("histogram rectangle outside image")
    region = img.pixels[y0 : y0 + rh, x0 : x0 + rw]
    if region.ndim == 2:
        region = region[:, :, None]
    idx = (region.astype(np.int64) * bins) // 256
    hist = np.concatenate(
        [np.bincount(idx[:, :, c].ravel(), minlength=bins) for c in range(region.shape[2])]
    ).astype(np.float64)
    return hist / hist.sum()


def chi_square(a: np.ndarray, b: np.ndarray) -> float:
    """0.5 * sum (a-b)^2/(a+b); zero-mass bins are skipped. In [0, 1] for distributions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = a + b
    mask = denom > 0
    return float(0.5 * np.sum((a[mask] - b[mask]) ** 2 / denom[mask]))


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment; returns float64."""
    src = np.asarray(values, dtype=np.float64)
    h, w = src.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if src.ndim == 3:
        fy = fy[:, :, None]
        fx = fx[:, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_image(img: Image, out_h: int, out_w: int) -> Image:
    resized = resize_bilinear(img.pixels, out_h, out_w)
    return Image(np.clip(np.rint(resized), 0, 255).astype(np.uint8))


def crop_region(img: Image, cx: float, cy: float, w: float, h: float) -> Image:
    """Crop a centered rectangle, replicating edge pixels outside the frame."""
    cw = max(1, int(round(w)))
    ch = max(1, int(round(h)))
    x0 = int(round(cx - cw / 2.0))
    y0 = int(round(cy - ch / 2.0))
    xs = np.clip(np.arange(x0, x0 + cw), 0, img.width - 1)
    ys = np.clip(np.arange(y0, y0 + ch), 0, img.height - 1)
    return Image(img.pixels[np.ix_(ys, xs)])
