"""Synthetic moving-target videos, annotation derivation, and prior-map caching.

Videos are textured blobs bouncing over cluttered, per-video backgrounds with
moving distractors; textures are glued to the objects so the objectness cues
(gradient, color contrast, edge density) have real signal. Every byte is a
deterministic function of the generation spec.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import Image, load_image, save_image
from .top_prior import PointAnnotation, TopConfig, load_top, save_top, top_map


@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 64
    frames_per_video: int = 16
    frame_size: int = 128
    target_size: tuple[float, float] = (18.0, 36.0)
    velocity: tuple[float, float] = (2.0, 5.0)
    scale_drift: float = 0.01
    clutter: float = 0.8
    distractors: int = 5
    distractor_gap: float = 0.3  # min target separation, fraction of frame size
    occluder_prob: float = 0.25
    noise_sigma: float = 2.0
    seed: int = 0


@dataclass
class FrameRecord:
    path: str
    box: tuple[float, float, float, float]  # ground-truth cx, cy, w, h
    point: tuple[float, float] | None = None


@dataclass
class VideoRecord:
    video_id: int
    frames: list[FrameRecord]
    sparse_box_interval: int | None = None


@dataclass
class Manifest:
    root: str
    videos: list[VideoRecord]

    def frame_count(self) -> int:
        return sum(len(v.frames) for v in self.videos)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "root": manifest.root,
        "videos": [
            {
                "video_id": v.video_id,
                "sparse_box_interval": v.sparse_box_interval,
                "frames": [
                    {"path": f.path, "box": list(f.box), "point": list(f.point) if f.point else None}
                    for f in v.frames
                ],
            }
            for v in manifest.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> Manifest:
    doc = json.loads(Path(path).read_text())
    videos = [
        VideoRecord(
            video_id=v["video_id"],
            sparse_box_interval=v.get("sparse_box_interval"),
            frames=[
                FrameRecord(
                    path=f["path"],
                    box=tuple(f["box"]),
                    point=tuple(f["point"]) if f["point"] else None,
                )
                for f in v["frames"]
            ],
        )
        for v in doc["videos"]
    ]
    return Manifest(root=doc["root"], videos=videos)


# -- rendering --------------------------------------------------------------

def _texture(
    rng: np.random.Generator, mean_color: np.ndarray, amplitude: int = 55, size: int = 24
) -> np.ndarray:
    """Checker-modulated noise tile around a mean color."""
    noise = rng.integers(-amplitude, amplitude + 1, size=(size, size, 1))
    half = max(1, amplitude // 2)
    checker = np.where(
        (np.add.outer(np.arange(size) // 3, np.arange(size) // 3) % 2 == 0)[:, :, None], half, -half
    )
    return np.clip(mean_color[None, None, :] + noise + checker, 0, 255).astype(np.uint8)


def _paint_ellipse(canvas: np.ndarray, cx: float, cy: float, w: float, h: float,
                   texture: np.ndarray) -> None:
    size = canvas.shape[0]
    x0 = max(0, int(np.floor(cx - w / 2)))
    x1 = min(size, int(np.ceil(cx + w / 2)) + 1)
    y0 = max(0, int(np.floor(cy - h / 2)))
    y1 = min(size, int(np.ceil(cy + h / 2)) + 1)
    if x1 <= x0 or y1 <= y0:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    inside = ((xs + 0.5 - cx) / (w / 2)) ** 2 + ((ys + 0.5 - cy) / (h / 2)) ** 2 <= 1.0
    # texture coordinates ride with the object so its appearance is stable
    th, tw = texture.shape[:2]
    u = np.clip(((xs + 0.5 - (cx - w / 2)) / w * (tw - 1)).astype(np.int64), 0, tw - 1)
    v = np.clip(((ys + 0.5 - (cy - h / 2)) / h * (th - 1)).astype(np.int64), 0, th - 1)
    patch = canvas[y0:y1, x0:x1]
    patch[inside] = texture[v[inside], u[inside]]


@dataclass
class _Mover:
    cx: float
    cy: float
    w: float
    h: float
    vx: float
    vy: float
    texture: np.ndarray

    def step(self, size: int) -> None:
        self.cx += self.vx
        self.cy += self.vy
        if self.cx - self.w / 2 < 0 or self.cx + self.w / 2 > size:
            self.vx = -self.vx
            self.cx = float(np.clip(self.cx, self.w / 2, size - self.w / 2))
        if self.cy - self.h / 2 < 0 or self.cy + self.h / 2 > size:
            self.vy = -self.vy
            self.cy = float(np.clip(self.cy, self.h / 2, size - self.h / 2))

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _spawn_mover(rng: np.random.Generator, spec: SyntheticSpec, palette: np.ndarray) -> _Mover:
    size = spec.frame_size
    w = float(rng.uniform(*spec.target_size))
    h = float(w * rng.uniform(0.75, 1.33))
    speed = rng.uniform(*spec.velocity)
    angle = rng.uniform(0, 2 * np.pi)
    return _Mover(
        cx=float(rng.uniform(w / 2 + 1, size - w / 2 - 1)),
        cy=float(rng.uniform(h / 2 + 1, size - h / 2 - 1)),
        w=w,
        h=h,
        vx=float(speed * np.cos(angle)),
        vy=float(speed * np.sin(angle)),
        texture=_texture(rng, palette),
    )


def _render_video(spec: SyntheticSpec, video_id: int, out_dir: Path) -> VideoRecord:
    rng = np.random.default_rng([spec.seed, video_id])
    size = spec.frame_size

    # difficulty is split by design: static clutter carries weak texture (the
    # prior maps must find the target next to it on gradient/contrast cues),
    # while the moving distractors share the target's palette and texture
    # strength so only learned fine-texture features keep tracking
    base = rng.integers(40, 131, size=3)
    background = np.clip(
        base[None, None, :] + rng.integers(-12, 13, size=(size, size, 1)), 0, 255
    ).astype(np.uint8)
    for _ in range(int(spec.clutter * 12)):
        cw, chh = rng.integers(10, 36, size=2)
        cx = float(rng.uniform(cw / 2, size - cw / 2))
        cy = float(rng.uniform(chh / 2, size - chh / 2))
        tone = np.clip(base + rng.integers(-30, 31, size=3), 0, 255)
        _paint_ellipse(background, cx, cy, float(cw), float(chh), _texture(rng, tone, amplitude=16))

    target_color = rng.integers(80, 201, size=3)
    target = _spawn_mover(rng, spec, target_color)
    distractors = []
    for _ in range(spec.distractors):
        color = np.clip(target_color + rng.integers(-25, 26, size=3), 0, 255)
        distractors.append(_spawn_mover(rng, spec, color))

    # distractors keep a minimum separation from the target (which also
    # enforces the IoU <= 0.3 bound): close strong-texture objects would
    # hijack the click's objectness prior, not just the tracker
    min_sep = spec.distractor_gap * size

    def too_close(mover):
        return (
            np.hypot(mover.cx - target.cx, mover.cy - target.cy) < min_sep
            or _box_iou(mover.box, target.box) > 0.3
        )

    frames: list[FrameRecord] = []
    for f in range(spec.frames_per_video):
        canvas = background.copy()
        for d in distractors:
            d.step(size)
            if too_close(d):
                mirrored = replace(d, cx=size - d.cx, cy=size - d.cy)
                if not too_close(mirrored):
                    _paint_ellipse(canvas, mirrored.cx, mirrored.cy, d.w, d.h, d.texture)
                continue  # distractor stays hidden this frame
            _paint_ellipse(canvas, d.cx, d.cy, d.w, d.h, d.texture)

        if f > 0:
            target.step(size)
            drift = 1.0 + float(rng.uniform(-spec.scale_drift, spec.scale_drift))
            lo, hi = spec.target_size
            target.w = float(np.clip(target.w * drift, lo, hi * 1.33))
            target.h = float(np.clip(target.h * drift, lo, hi * 1.33))
            target.cx = float(np.clip(target.cx, target.w / 2, size - target.w / 2))
            target.cy = float(np.clip(target.cy, target.h / 2, size - target.h / 2))
        _paint_ellipse(canvas, target.cx, target.cy, target.w, target.h, target.texture)

        if rng.random() < spec.occluder_prob:
            bar_w = target.w * rng.uniform(0.3, 0.6)
            bar_x = target.cx + rng.uniform(-target.w / 3, target.w / 3)
            tone = np.clip(base + 25, 0, 255)
            _paint_ellipse(canvas, bar_x, target.cy, bar_w, target.h * 1.1, _texture(rng, tone, amplitude=16))

        if spec.noise_sigma > 0:
            noisy = canvas.astype(np.float64) + rng.normal(0, spec.noise_sigma, canvas.shape)
            canvas = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)

        name = f"v{video_id:03d}_f{f:03d}.ppm"
        save_image(Image(canvas), out_dir / name)
        frames.append(FrameRecord(path=name, box=target.box))
    return VideoRecord(video_id=video_id, frames=frames)


def generate_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Render every video to PPM files and return the manifest (also written
    to out_dir/manifest.json)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = [_render_video(spec, vid, out_dir) for vid in range(spec.n_videos)]
    manifest = Manifest(root=str(out_dir), videos=videos)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def points_from_boxes(manifest: Manifest, noise_px: float, rng: np.random.Generator) -> Manifest:
    """Annotate every frame with its box center, optionally shifted by a fixed
    radius in a uniformly random direction (clipped to the frame)."""
    videos = []
    for v in manifest.videos:
        frames = []
        for f in v.frames:
            cx, cy, _, _ = f.box
            if noise_px > 0:
                angle = rng.uniform(0, 2 * np.pi)
                cx += noise_px * np.cos(angle)
                cy += noise_px * np.sin(angle)
            img_size = _frame_size(manifest, f)
            point = (
                float(np.clip(cx, 0.0, img_size[0] - 1.0)),
                float(np.clip(cy, 0.0, img_size[1] - 1.0)),
            )
            frames.append(FrameRecord(path=f.path, box=f.box, point=point))
        videos.append(
            VideoRecord(video_id=v.video_id, frames=frames, sparse_box_interval=v.sparse_box_interval)
        )
    return Manifest(root=manifest.root, videos=videos)


_SIZE_CACHE: dict[str, tuple[int, int]] = {}


def _frame_size(manifest: Manifest, frame: FrameRecord) -> tuple[int, int]:
    path = str(Path(manifest.root) / frame.path)
    if path not in _SIZE_CACHE:
        img = load_image(path)
        _SIZE_CACHE[path] = (img.width, img.height)
    return _SIZE_CACHE[path]


# -- prior-map cache --------------------------------------------------------

def _config_digest(cfg: TopConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:16]


def _frame_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


@dataclass
class CacheStats:
    computed: int = 0
    reused: int = 0


def cache_top_maps(
    manifest: Manifest,
    cfg: TopConfig,
    cache_dir: str | Path,
    jobs: int = 1,
) -> CacheStats:
    """One prior-map file per frame, skipped when (config digest, frame digest)
    already match; corrupt entries are detected by header check and redone."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    cfg_digest = _config_digest(cfg)
    stats = CacheStats()

    work = []
    for v in manifest.videos:
        for fid, frame in enumerate(v.frames):
            if frame.point is None:
                raise ValueError(f"frame {frame.path} has no point annotation")
            key = f"v{v.video_id:03d}_f{fid:03d}"
            frame_path = Path(manifest.root) / frame.path
            entry = index.get(key)
            cache_file = cache_dir / f"{key}.top"
            digest = _frame_digest(frame_path)
            if (
                entry
                and entry["config"] == cfg_digest
                and entry["frame"] == digest
                and cache_file.exists()
            ):
                try:
                    load_top(cache_file)
                    stats.reused += 1
                    continue
                except ValueError:
                    pass  # corrupt entry, recompute below
            work.append((key, frame_path, frame.point, digest, cache_file))

    def compute(item):
        key, frame_path, point, digest, cache_file = item
        img = load_image(frame_path)
        prior = top_map(img, PointAnnotation(point[0], point[1]), cfg)
        save_top(prior, cache_file)
        return key, digest

    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(compute, work))
    else:
        results = [compute(item) for item in work]

    for key, digest in results:
        index[key] = {"config": cfg_digest, "frame": digest, "file": f"{key}.top"}
        stats.computed += 1
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return stats


@dataclass
class VideoData:
    video_id: int
    frames: list[Image]
    boxes: list[tuple[float, float, float, float]]
    points: list[tuple[float, float]]
    top_maps: list[np.ndarray]


@dataclass
class TrainingData:
    videos: list[VideoData]

    def __len__(self) -> int:
        return len(self.videos)


def load_video_frames(manifest: Manifest) -> TrainingData:
    """Frames and annotations only (no prior maps); enough for tracking."""
    videos = []
    for v in manifest.videos:
        frames = [load_image(Path(manifest.root) / f.path) for f in v.frames]
        videos.append(
            VideoData(
                video_id=v.video_id,
                frames=frames,
                boxes=[f.box for f in v.frames],
                points=[f.point for f in v.frames],
                top_maps=[],
            )
        )
    return TrainingData(videos=videos)


def load_training_data(
    manifest: Manifest, cache_dir: str | Path, cfg: TopConfig, jobs: int = 1
) -> TrainingData:
    """Frames + cached prior maps in memory; fills cache misses first."""
    cache_top_maps(manifest, cfg, cache_dir, jobs=jobs)
    cache_dir = Path(cache_dir)
    videos = []
    for v in manifest.videos:
        frames, boxes, points, tops = [], [], [], []
        for fid, frame in enumerate(v.frames):
            frames.append(load_image(Path(manifest.root) / frame.path))
            boxes.append(frame.box)
            points.append(frame.point)
            tops.append(load_top(cache_dir / f"v{v.video_id:03d}_f{fid:03d}.top"))
        videos.append(
            VideoData(video_id=v.video_id, frames=frames, boxes=boxes, points=points, top_maps=tops)
        )
    return TrainingData(videos=videos)
