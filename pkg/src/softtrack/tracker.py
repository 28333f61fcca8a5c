"""Siamese cross-correlation tracking and pseudo-bounding-box labeling.

The template is a Gaussian-pooled feature vector of the init crop; each step
correlates it against the embedded search crop, upsamples the response, and
moves the center to the (cosine-window weighted) peak. Point supervision
carries no scale, so box size stays frozen at init. The labeling schema
tracks between sparse box anchors and snaps to the annotated point whenever
the estimate strays too far.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .backbone import BackboneParams, embed
from .contrastive import cumulative_select
from .imaging import Image, crop_region, resize_image
from .top_prior import box_iou


@dataclass(frozen=True)
class TrackerConfig:
    search_scale: float = 2.0  # search crop = this x current box size
    window_weight: float = 0.3  # cosine motion prior blend
    response_upsample: int = 4
    crop_size: int = 96
    template_sigma_factor: float = 0.25  # Gaussian pooling sigma = factor * H


@dataclass(frozen=True)
class SchemaConfig:
    T: int = 10  # sparse boxes every T frames
    fail_dist: float = 20.0  # px; beyond this the point overrides the tracker
    point_cost_s: float = 2.27
    box_cost_s: float = 10.2
    tracker_cost_s: float = 0.1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("snippet length T must be >= 1")
        if min(self.point_cost_s, self.box_cost_s, self.tracker_cost_s) <= 0:
            raise ValueError("costs must be positive")


@dataclass(frozen=True)
class PseudoBoxConfig:
    alpha: float = 0.5  # prior mass gathered into the box

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")


@dataclass
class TrackState:
    template: np.ndarray  # (C,) pooled feature vector
    center: tuple[float, float]
    size: tuple[float, float]


@dataclass
class TrackedFrame:
    frame: int
    cx: float
    cy: float
    w: float
    h: float
    peak: float
    corrected: bool = False

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def gaussian_pool(feature: np.ndarray, sigma_factor: float) -> np.ndarray:
    """Centered Gaussian-weighted mean over (C, H, W) feature cells."""
    c, h, w = feature.shape
    sigma = max(sigma_factor * h, 1e-6)
    ys = np.arange(h) - (h - 1) / 2
    xs = np.arange(w) - (w - 1) / 2
    weights = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma**2))
    weights /= weights.sum()
    return (feature * weights[None]).sum(axis=(1, 2))


def init_track(
    params: BackboneParams, frame: Image, init_box, cfg: TrackerConfig = TrackerConfig()
) -> TrackState:
    cx, cy, w, h = init_box
    if w < 2 or h < 2:
        raise ValueError(f"degenerate init box {init_box}")
    crop = resize_image(crop_region(frame, cx, cy, w, h), cfg.crop_size, cfg.crop_size)
    feature = embed(params, crop).tensor.values
    template = gaussian_pool(feature, cfg.template_sigma_factor)
    return TrackState(template=template, center=(float(cx), float(cy)), size=(float(w), float(h)))


def response_map(feature: np.ndarray, template: np.ndarray) -> np.ndarray:
    """(H, W) inner products of feature cells with the template."""
    return np.tensordot(template, feature, axes=(0, 0))


def _upsample(response: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic resample onto a factor-times denser grid that keeps the cell
    centers (and in particular the exact map center) on the lattice."""
    h, w = response.shape
    ys = np.arange((h - 1) * factor + 1) / factor
    xs = np.arange((w - 1) * factor + 1) / factor
    grid = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(response, grid, order=3, mode="nearest")


def _cosine_window(shape: tuple[int, int]) -> np.ndarray:
    wy = np.hanning(shape[0])
    wx = np.hanning(shape[1])
    return np.outer(wy, wx)


def track_frame(
    params: BackboneParams, state: TrackState, frame: Image, cfg: TrackerConfig = TrackerConfig()
) -> tuple[TrackState, float]:
    """One tracking step; returns the updated state and the raw response peak."""
    cx, cy = state.center
    w, h = state.size
    sw, sh = cfg.search_scale * w, cfg.search_scale * h
    if cx + sw / 2 < 0 or cx - sw / 2 > frame.width or cy + sh / 2 < 0 or cy - sh / 2 > frame.height:
        raise ValueError("search window fell outside the frame")
    crop = resize_image(crop_region(frame, cx, cy, sw, sh), cfg.crop_size, cfg.crop_size)
    feature = embed(params, crop).tensor.values
    raw = response_map(feature, state.template)
    peak = float(raw.max())

    up = _upsample(raw, cfg.response_upsample)
    span = up.max() - up.min()
    normalized = (up - up.min()) / span if span > 0 else np.full_like(up, 0.5)
    blended = (1 - cfg.window_weight) * normalized + cfg.window_weight * _cosine_window(up.shape)

    iy, ix = np.unravel_index(int(np.argmax(blended)), blended.shape)
    fh, fw = raw.shape
    # grid cell -> feature coords -> fraction of the search crop -> frame px
    fy = iy / cfg.response_upsample - (fh - 1) / 2
    fx = ix / cfg.response_upsample - (fw - 1) / 2
    dx = fx / fw * sw
    dy = fy / fh * sh
    new_cx = float(np.clip(cx + dx, 0, frame.width - 1))
    new_cy = float(np.clip(cy + dy, 0, frame.height - 1))
    return TrackState(template=state.template, center=(new_cx, new_cy), size=state.size), peak


def track_video(
    params: BackboneParams,
    frames: list[Image],
    init_box,
    cfg: TrackerConfig = TrackerConfig(),
) -> list[TrackedFrame]:
    """Track from a first-frame box through the sequence."""
    state = init_track(params, frames[0], init_box, cfg)
    out = [TrackedFrame(0, *state.center, *state.size, peak=float("nan"))]
    for idx, frame in enumerate(frames[1:], start=1):
        state, peak = track_frame(params, state, frame, cfg)
        out.append(TrackedFrame(idx, *state.center, *state.size, peak=peak))
    return out


def pseudo_boxes_schema(
    frames: list[Image],
    points: list[tuple[float, float]],
    sparse_boxes: dict[int, tuple[float, float, float, float]],
    params: BackboneParams,
    schema: SchemaConfig = SchemaConfig(),
    cfg: TrackerConfig = TrackerConfig(),
) -> list[TrackedFrame]:
    """Track between sparse box anchors; whenever the estimated center is more
    than fail_dist from the frame's annotated point, snap the box to the point
    and re-center the tracker there. Box size is carried from the snippet's
    anchor box."""
    n = len(frames)
    if len(points) != n:
        raise ValueError("one point per frame required")
    out: list[TrackedFrame] = []
    for start in range(0, n, schema.T):
        if start not in sparse_boxes:
            raise ValueError(f"missing sparse box for snippet starting at frame {start}")
        box = sparse_boxes[start]
        state = init_track(params, frames[start], box, cfg)
        out.append(TrackedFrame(start, *box, peak=float("nan")))
        for f in range(start + 1, min(start + schema.T, n)):
            state, peak = track_frame(params, state, frames[f], cfg)
            px, py = points[f]
            est_x, est_y = state.center
            if math.hypot(est_x - px, est_y - py) > schema.fail_dist:
                state = TrackState(template=state.template, center=(px, py), size=state.size)
                out.append(TrackedFrame(f, px, py, *state.size, peak=peak, corrected=True))
            else:
                out.append(TrackedFrame(f, est_x, est_y, *state.size, peak=peak))
    return out


def pseudo_box_from_top(
    top: np.ndarray, alpha: float, frame_dims: tuple[int, int] | None = None
) -> tuple[float, float, float, float]:
    """Tight bounding box of the smallest highest-probability cell set whose
    mass reaches alpha, optionally scaled to frame coordinates."""
    sel = cumulative_select(top, alpha)
    h, w = top.shape
    cells = sel.selected()
    ys, xs = cells // w, cells % w
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    box = ((x0 + x1) / 2, (y0 + y1) / 2, float(x1 - x0), float(y1 - y0))
    if frame_dims is None:
        return box
    sx = frame_dims[0] / w
    sy = frame_dims[1] / h
    return (box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy)


def schema_cost(schema: SchemaConfig = SchemaConfig()) -> float:
    """Per-frame labeling cost in seconds: points on the non-anchor frames,
    one tracker pass everywhere, sparse boxes every T frames."""
    t = schema.T
    return schema.point_cost_s * (1 - 1 / t) + schema.tracker_cost_s + schema.box_cost_s / t


def point_vs_box_speedup(schema: SchemaConfig = SchemaConfig()) -> float:
    return schema.box_cost_s / schema.point_cost_s


def evaluate(
    predicted: list, ground_truth: list, radii: tuple[int, ...] = (5, 10, 20)
) -> dict:
    """Center-error precision at the given radii, mean center error, and the
    mean IoU-success over thresholds 0, 0.05, ..., 1."""
    if len(predicted) != len(ground_truth):
        raise ValueError("trajectory and ground truth lengths differ")
    pred_boxes = [p.box if isinstance(p, TrackedFrame) else tuple(p) for p in predicted]
    errors = np.array(
        [math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in zip(pred_boxes, ground_truth)]
    )
    ious = np.array([box_iou(p, g) for p, g in zip(pred_boxes, ground_truth)])
    thresholds = np.arange(0.0, 1.0001, 0.05)
    success = np.array([(ious >= t).mean() for t in thresholds])
    metrics = {f"precision@{r}": float((errors <= r).mean()) for r in radii}
    metrics["mean_center_error"] = float(errors.mean())
    metrics["success_auc"] = float(success.mean())
    return metrics


def evaluate_on_videos(
    params: BackboneParams,
    videos,
    cfg: TrackerConfig = TrackerConfig(),
    radii: tuple[int, ...] = (5, 10, 20),
) -> tuple[dict, np.ndarray]:
    """Track every video from its first ground-truth box and pool metrics over
    all frames after the init frame. Returns (metrics, center errors)."""
    errors: list[float] = []
    ious: list[float] = []
    for video in videos:
        traj = track_video(params, video.frames, video.boxes[0], cfg)
        for t, gt in zip(traj[1:], video.boxes[1:]):
            errors.append(math.hypot(t.cx - gt[0], t.cy - gt[1]))
            ious.append(box_iou(t.box, gt))
    err = np.asarray(errors)
    iou = np.asarray(ious)
    thresholds = np.arange(0.0, 1.0001, 0.05)
    metrics = {f"precision@{r}": float((err <= r).mean()) for r in radii}
    metrics["mean_center_error"] = float(err.mean())
    metrics["success_auc"] = float(np.mean([(iou >= t).mean() for t in thresholds]))
    return metrics, err


def save_trajectory(trajectory: list[TrackedFrame], path: str | Path) -> None:
    """JSON lines, one object per frame."""
    with open(path, "w") as fp:
        for t in trajectory:
            peak = None if math.isnan(t.peak) else t.peak
            fp.write(
                json.dumps(
                    {"frame": t.frame, "cx": t.cx, "cy": t.cy, "w": t.w, "h": t.h, "peak": peak}
                )
                + "\n"
            )


def load_trajectory(path: str | Path) -> list[TrackedFrame]:
    out = []
    for line in Path(path).read_text().splitlines():
        doc = json.loads(line)
        peak = float("nan") if doc["peak"] is None else doc["peak"]
        out.append(TrackedFrame(doc["frame"], doc["cx"], doc["cy"], doc["w"], doc["h"], peak))
    return out
