"""Target-objectness prior maps from a single annotated point.

One frame plus one click turns into a per-location target probability grid:
random boxes centered on the click and edge-anchored boxes are scored with
three objectness cues, survivors of NMS stamp their scores onto the frame,
large peaks are clipped to the mean of the top fraction, and a softmax over
locations yields the prior. The whole pipeline is a deterministic function
of (image, point, config, seed).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter

from .imaging import (
    Image,
    chi_square,
    gradient_magnitude,
    integral_table,
    luminance,
    rect_sums,
)

# edge-proposal grid (see edge_proposals): candidate boxes per local maximum
EDGE_TOP_K = 200
EDGE_SCALES = 5
EDGE_ASPECTS = (0.5, 1.0, 2.0)
EDGE_JITTER_PX = 2.0

MIN_BOX_SIDE = 4.0
MIN_BOX_AREA = 16.0

TOP_CACHE_MAGIC = b"TOPM"


@dataclass(frozen=True)
class TopConfig:
    n_random: int = 5000
    n_edge: int = 1000
    edge_radius: float = 30.0
    nms_iou: float = 0.7
    nms_keep: int = 64
    clip_eta: float = 0.10
    scale_range: tuple[float, float] | None = None  # None -> (8, 0.8*min(W,H))
    aspect_range: tuple[float, float] = (1.0 / 3.0, 3.0)
    # temperature for the final softmax over locations: cue products keep the
    # accumulated scores small, so a sub-1 temperature restores the regime the
    # clip step presumes (mass concentrated on the clipped object plateau,
    # decaying into the background rather than spread uniformly)
    softmax_temp: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if not 0.0 < self.clip_eta <= 1.0:
            raise ValueError("clip_eta must be in (0, 1]")
        if self.nms_keep < 1:
            raise ValueError("nms_keep must be >= 1")
        if self.softmax_temp <= 0:
            raise ValueError("softmax_temp must be positive")


@dataclass(frozen=True)
class PointAnnotation:
    x: float
    y: float
    frame_id: int = 0


@dataclass
class Proposal:
    box: tuple[float, float, float, float]  # cx, cy, w, h
    score: float
    source: str  # "random" | "edge"


def _boxes_array(proposals: list[Proposal]) -> np.ndarray:
    return np.array([p.box for p in proposals], dtype=np.float64).reshape(-1, 4)


def clip_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """Clip (cx, cy, w, h) rows to the frame, keeping sides >= MIN_BOX_SIDE."""
    cx, cy, w, h = boxes.T
    left = np.clip(cx - w / 2, 0, width)
    right = np.clip(cx + w / 2, 0, width)
    top = np.clip(cy - h / 2, 0, height)
    bot = np.clip(cy + h / 2, 0, height)
    w = np.maximum(right - left, MIN_BOX_SIDE)
    h = np.maximum(bot - top, MIN_BOX_SIDE)
    cx = np.clip((left + right) / 2, w / 2, width - w / 2)
    cy = np.clip((top + bot) / 2, h / 2, height - h / 2)
    return np.stack([cx, cy, w, h], axis=1)


def boxes_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of one (4,) box against (n, 4) boxes, center format."""
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / union, 0.0)


def box_iou(a, b) -> float:
    return float(boxes_iou(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64).reshape(1, 4))[0])


def _pixel_rect(boxes: np.ndarray, width: int, height: int, scale: float = 1.0):
    """Integer pixel spans covered by boxes (pixel-center rule), as half-open
    [x0, x1) x [y0, y1) ranges on a grid downscaled by `scale`."""
    cx, cy, w, h = (boxes / scale).T if scale != 1.0 else boxes.T
    gw = int(width / scale) if scale != 1.0 else width
    gh = int(height / scale) if scale != 1.0 else height
    x0 = np.clip(np.ceil(cx - w / 2 - 0.5).astype(np.int64), 0, gw)
    x1 = np.clip(np.floor(cx + w / 2 - 0.5).astype(np.int64) + 1, 0, gw)
    y0 = np.clip(np.ceil(cy - h / 2 - 0.5).astype(np.int64), 0, gh)
    y1 = np.clip(np.floor(cy + h / 2 - 0.5).astype(np.int64) + 1, 0, gh)
    return x0, y0, x1, y1


def random_proposals(
    point: PointAnnotation, img_dims: tuple[int, int], cfg: TopConfig, rng: np.random.Generator
) -> list[Proposal]:
    """n_random boxes centered on the click, log-uniform in scale and aspect."""
    width, height = img_dims
    if not (0 <= point.x < width and 0 <= point.y < height):
        raise ValueError(f"annotated point ({point.x}, {point.y}) outside {width}x{height} frame")
    lo, hi = cfg.scale_range if cfg.scale_range else (8.0, 0.8 * min(width, height))
    if hi <= lo:
        raise ValueError(f"frame {width}x{height} too small for the proposal scale range")
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=cfg.n_random))
    aspects = np.exp(
        rng.uniform(np.log(cfg.aspect_range[0]), np.log(cfg.aspect_range[1]), size=cfg.n_random)
    )
    w = scales * np.sqrt(aspects)
    h = scales / np.sqrt(aspects)
    boxes = np.stack([np.full(cfg.n_random, point.x), np.full(cfg.n_random, point.y), w, h], axis=1)
    boxes = clip_boxes(boxes, width, height)
    return [Proposal(box=tuple(b), score=0.0, source="random") for b in boxes]


def _local_maxima(grad: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Plateau-tolerant 3x3 local maxima of a gradient map, strongest first."""
    peaks = (grad == maximum_filter(grad, size=3, mode="nearest")) & (grad > 0)
    ys, xs = np.nonzero(peaks)
    if len(ys) == 0:
        return ys, xs
    order = np.lexsort((xs, ys, -grad[ys, xs]))[:top_k]
    return ys[order], xs[order]


def edge_proposals(
    img: Image, point: PointAnnotation, cfg: TopConfig, rng: np.random.Generator
) -> list[Proposal]:
    """Boxes pinned to strong-gradient locations near the click.

    Each of the top-K gradient maxima anchors a scale/aspect grid of boxes;
    the anchor sits at the box center or at the midpoint of one of its four
    sides (drawn at random, so contours can end up enclosed rather than
    centered on). Survivors must have centers within edge_radius of the
    annotated point; at most n_edge are kept, strongest anchors first.
    """
    grad = gradient_magnitude(img)
    ys, xs = _local_maxima(grad, EDGE_TOP_K)
    if len(ys) == 0:
        return []
    lo, hi = 12.0, 0.55 * min(img.width, img.height)
    scales = np.geomspace(lo, max(hi, lo + 1), EDGE_SCALES)
    aspects = np.asarray(EDGE_ASPECTS)

    anchor_x = np.repeat(xs.astype(np.float64), EDGE_SCALES * len(aspects))
    anchor_y = np.repeat(ys.astype(np.float64), EDGE_SCALES * len(aspects))
    per_anchor_w = (scales[:, None] * np.sqrt(aspects)[None, :]).ravel()
    per_anchor_h = (scales[:, None] / np.sqrt(aspects)[None, :]).ravel()
    w = np.tile(per_anchor_w, len(ys))
    h = np.tile(per_anchor_h, len(ys))

    n = len(w)
    placement = rng.integers(0, 5, size=n)  # center, left, right, top, bottom
    jitter = rng.uniform(-EDGE_JITTER_PX, EDGE_JITTER_PX, size=(n, 2))
    cx = anchor_x + jitter[:, 0]
    cy = anchor_y + jitter[:, 1]
    cx = np.where(placement == 1, cx + w / 2, cx)
    cx = np.where(placement == 2, cx - w / 2, cx)
    cy = np.where(placement == 3, cy + h / 2, cy)
    cy = np.where(placement == 4, cy - h / 2, cy)

    boxes = clip_boxes(np.stack([cx, cy, w, h], axis=1), img.width, img.height)
    dist = np.hypot(boxes[:, 0] - point.x, boxes[:, 1] - point.y)
    keep = np.nonzero(dist <= cfg.edge_radius)[0][: cfg.n_edge]
    return [Proposal(box=tuple(boxes[i]), score=0.0, source="edge") for i in keep]


class ObjectnessCues:
    """Per-frame tables for scoring boxes with saliency, contrast and edge density.

    Build once per frame, then score any number of boxes in O(1) each via
    integral-image lookups.
    """

    HIST_BINS = 16
    SALIENCY_SCALES = (1, 2, 4)
    STRONG_PERCENTILE = 75.0

    def __init__(self, img: Image):
        self.width = img.width
        self.height = img.height
        gray = luminance(img)

        self._grad_tables = []
        level = gray
        for s in self.SALIENCY_SCALES:
            if s > 1:
                level = self._halve(level)
            g = self._sobel(level)
            peak = g.max()
            self._grad_tables.append(integral_table(g / peak if peak > 0 else g))

        g0 = self._sobel(gray)
        strong = g0 > np.percentile(g0, self.STRONG_PERCENTILE)
        self._strong_table = integral_table(strong.astype(np.float64))

        px = img.pixels if img.channels == 3 else img.pixels[:, :, None]
        idx = (px.astype(np.int64) * self.HIST_BINS) // 256
        planes = []
        for c in range(px.shape[2]):
            for b in range(self.HIST_BINS):
                planes.append(integral_table((idx[:, :, c] == b).astype(np.float64)))
        self._hist_tables = np.stack(planes)  # (n_bins_total, h+1, w+1)

    @staticmethod
    def _sobel(gray: np.ndarray) -> np.ndarray:
        p = np.pad(gray, 1, mode="edge")
        gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
        gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
        return np.hypot(gx, gy)

    @staticmethod
    def _halve(gray: np.ndarray) -> np.ndarray:
        h2, w2 = gray.shape[0] // 2, gray.shape[1] // 2
        if h2 < 1 or w2 < 1:
            return gray
        return gray[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))

    def _hist_counts(self, x0, y0, x1, y1) -> np.ndarray:
        # (n_boxes, bins) bin counts via the 4-corner formula on every plane
        t = self._hist_tables
        total = t[:, y1, x1] - t[:, y0, x1] - t[:, y1, x0] + t[:, y0, x0]
        return np.maximum(total.T, 0.0)

    def score(self, boxes: np.ndarray) -> np.ndarray:
        """Objectness in [0, 1] for (n, 4) center-format boxes: the product of
        multi-scale saliency, squashed chi-square color contrast against a
        same-area surrounding ring, and border-band edge density."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n = len(boxes)
        if n == 0:
            return np.zeros(0)

        # multi-scale saliency: mean normalized gradient inside the box
        saliency = np.zeros(n)
        for table, s in zip(self._grad_tables, self.SALIENCY_SCALES):
            x0, y0, x1, y1 = _pixel_rect(boxes, self.width, self.height, scale=float(s))
            area = np.maximum((x1 - x0) * (y1 - y0), 1)
            saliency += rect_sums(table, x0, y0, x1, y1) / area
        saliency /= len(self.SALIENCY_SCALES)

        # color contrast: chi-square between the box histogram and the
        # surrounding same-area ring (outer box scaled by sqrt(2))
        x0, y0, x1, y1 = _pixel_rect(boxes, self.width, self.height)
        inner = self._hist_counts(x0, y0, x1, y1)
        outer_boxes = boxes.copy()
        outer_boxes[:, 2:] *= math.sqrt(2.0)
        ox0, oy0, ox1, oy1 = _pixel_rect(
            clip_boxes(outer_boxes, self.width, self.height), self.width, self.height
        )
        ring = np.maximum(self._hist_counts(ox0, oy0, ox1, oy1) - inner, 0.0)
        inner_mass = inner.sum(axis=1, keepdims=True)
        ring_mass = ring.sum(axis=1, keepdims=True)
        pi = np.divide(inner, inner_mass, out=np.zeros_like(inner), where=inner_mass > 0)
        pr = np.divide(ring, ring_mass, out=np.zeros_like(ring), where=ring_mass > 0)
        denom = pi + pr
        chi = 0.5 * np.sum(
            np.divide((pi - pr) ** 2, denom, out=np.zeros_like(denom), where=denom > 0), axis=1
        )
        chi = np.where(ring_mass[:, 0] > 0, chi, 0.0)
        contrast = chi / (1.0 + chi)

        # edge density: strong-gradient fraction within the inner border band
        wpx = np.maximum(x1 - x0, 1)
        hpx = np.maximum(y1 - y0, 1)
        band = np.maximum(1, (0.1 * np.minimum(wpx, hpx)).astype(np.int64))
        ix0 = np.minimum(x0 + band, x1)
        ix1 = np.maximum(x1 - band, ix0)
        iy0 = np.minimum(y0 + band, y1)
        iy1 = np.maximum(y1 - band, iy0)
        box_strong = rect_sums(self._strong_table, x0, y0, x1, y1)
        core_strong = rect_sums(self._strong_table, ix0, iy0, ix1, iy1)
        band_area = wpx * hpx - (ix1 - ix0) * (iy1 - iy0)
        density = np.divide(
            box_strong - core_strong,
            band_area,
            out=np.zeros(n),
            where=band_area > 0,
        )

        return np.clip(saliency, 0, 1) * np.clip(contrast, 0, 1) * np.clip(density, 0, 1)


def objectness(img: Image, box) -> float:
    """Score one box; see ObjectnessCues for the cue definitions."""
    box = np.asarray(box, dtype=np.float64)
    if box[2] * box[3] < MIN_BOX_AREA:
        raise ValueError(f"degenerate box {tuple(box)}: area below {MIN_BOX_AREA} px^2")
    if (
        box[0] - box[2] / 2 < -1e-9
        or box[1] - box[3] / 2 < -1e-9
        or box[0] + box[2] / 2 > img.width + 1e-9
        or box[1] + box[3] / 2 > img.height + 1e-9
    ):
        raise ValueError("box extends outside the frame")
    return float(ObjectnessCues(img).score(box.reshape(1, 4))[0])


def nms(proposals: list[Proposal], iou_thresh: float, keep: int) -> list[Proposal]:
    """Greedy descending-score suppression; ties broken by input order."""
    if not proposals:
        return []
    scores = np.array([p.score for p in proposals])
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS requires finite scores")
    boxes = _boxes_array(proposals)
    order = np.argsort(-scores, kind="stable")
    kept_idx: list[int] = []
    kept_boxes = np.empty((0, 4))
    for i in order:
        if kept_idx and np.max(boxes_iou(boxes[i], kept_boxes)) > iou_thresh:
            continue
        kept_idx.append(int(i))
        kept_boxes = np.vstack([kept_boxes, boxes[i]])
        if len(kept_idx) >= keep:
            break
    return [proposals[i] for i in kept_idx]


def accumulate_scores(survivors: list[Proposal], frame_dims: tuple[int, int]) -> np.ndarray:
    """Coverage-weighted score sum per pixel, via corner stamps + prefix sums."""
    if not survivors:
        raise ValueError("accumulate_scores needs at least one proposal")
    width, height = frame_dims
    boxes = _boxes_array(survivors)
    scores = np.array([p.score for p in survivors])
    x0, y0, x1, y1 = _pixel_rect(boxes, width, height)
    stamps = np.zeros((height + 1, width + 1))
    np.add.at(stamps, (y0, x0), scores)
    np.add.at(stamps, (y0, x1), -scores)
    np.add.at(stamps, (y1, x0), -scores)
    np.add.at(stamps, (y1, x1), scores)
    return stamps.cumsum(axis=0).cumsum(axis=1)[:height, :width]


def max_clip(grid: np.ndarray, eta: float) -> np.ndarray:
    """Clip values above the mean of the ceil(eta*HW) largest entries."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must be in (0, 1]")
    flat = grid.ravel()
    k = max(1, math.ceil(eta * flat.size))
    top = np.partition(flat, flat.size - k)[flat.size - k :]
    return np.minimum(grid, top.mean())


def softmax_map(grid: np.ndarray) -> np.ndarray:
    """Exp-normalize over all locations; output sums to 1."""
    if not np.all(np.isfinite(grid)):
        raise ValueError("softmax_map requires a finite grid")
    e = np.exp(grid - grid.max())
    return e / e.sum()


def top_argmax(top: np.ndarray) -> tuple[float, float]:
    """(x, y) of the map maximum; exact ties (max-clip plateaus) resolve to
    the centroid of the maximal cells."""
    ys, xs = np.nonzero(top == top.max())
    return float(xs.mean()), float(ys.mean())


def top_map(img: Image, point: PointAnnotation, cfg: TopConfig) -> np.ndarray:
    """Full prior pipeline: proposals -> objectness -> NMS -> accumulate ->
    max-clip -> softmax. Returns a frame-resolution probability grid."""
    rng = np.random.default_rng(cfg.rng_seed)
    proposals = random_proposals(point, (img.width, img.height), cfg, rng)
    proposals += edge_proposals(img, point, cfg, rng)
    cues = ObjectnessCues(img)
    scores = cues.score(_boxes_array(proposals))
    for p, s in zip(proposals, scores):
        p.score = float(s)
    survivors = nms(proposals, cfg.nms_iou, cfg.nms_keep)
    grid = accumulate_scores(survivors, (img.width, img.height))
    return softmax_map(max_clip(grid, cfg.clip_eta) / cfg.softmax_temp)


def resample_top(top: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted average pooling to a coarser grid, renormalized to sum 1."""
    src_h, src_w = top.shape
    if out_h > src_h or out_w > src_w:
        raise ValueError("resample target larger than source")
    wy = _overlap_weights(src_h, out_h)
    wx = _overlap_weights(src_w, out_w)
    pooled = wy @ top @ wx.T
    return pooled / pooled.sum()


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) fractional-overlap averaging matrix; rows sum to 1."""
    edges_dst = np.arange(dst + 1) * (src / dst)
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = edges_dst[i], edges_dst[i + 1]
        j0, j1 = int(math.floor(lo)), int(math.ceil(hi))
        for j in range(j0, min(j1, src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


def save_top(top: np.ndarray, path: str | Path) -> None:
    """Write the 16-byte header (magic, u32 w/h/reserved LE) + f32 LE rows."""
    h, w = top.shape
    header = TOP_CACHE_MAGIC + struct.pack("<III", w, h, 0)
    Path(path).write_bytes(header + top.astype("<f4").tobytes())


def load_top(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != TOP_CACHE_MAGIC:
        raise ValueError(f"{path}: not a prior-map cache file")
    w, h, _ = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * w * h
    if len(data) < expected:
        raise ValueError(f"{path}: truncated cache file")
    return np.frombuffer(data[16:expected], dtype="<f4").reshape(h, w).astype(np.float64)
