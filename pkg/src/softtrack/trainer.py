"""Mini-batch construction, the optimization loop, and ablation switches.

A batch is 2 frames from each of N videos. Per video the two frames embed to
feature maps, global templates aggregate them through the cached prior maps,
and (depending on the ablation mode) soft negatives, mixups and local
templates join the loss. Everything random in a step derives from
(seed, step), so runs are bit-reproducible and resumable.
"""

from __future__ import annotations

import csv
import hashlib
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import contrastive as cl
from .backbone import (
    DESK_ARCH,
    BackboneParams,
    ConvSpec,
    embed,
    feature_shape,
    init_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .contrastive import ContrastiveConfig, NegativeSet, SoftSample
from .data import TrainingData, VideoData
from .imaging import Image, resize_image
from .top_prior import resample_top

ABLATION_MODES = ("gst_only", "sns", "sns_mixup", "full")

OPT_STATE_MAGIC = b"SOPT"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_videos: int = 8
    steps: int = 2000
    learning_rate: float = 3e-4
    lr_decay_factor: float = 0.1
    lr_decay_step: int | None = None  # None -> halfway through the schedule
    seed: int = 0
    ablation: str = "full"
    socl: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    symmetrize: bool = True
    crop_size: int = 96
    grad_clip: float = 5.0
    log_interval: int = 25
    checkpoint_interval: int = 500
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_videos < 2:
            raise ValueError("need at least 2 videos per batch")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}, want one of {ABLATION_MODES}")

    def lr_at(self, step: int) -> float:
        decay_at = self.lr_decay_step if self.lr_decay_step is not None else self.steps // 2
        return self.learning_rate * (self.lr_decay_factor if step >= decay_at else 1.0)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators, one pair per parameter tensor."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: BackboneParams) -> "OptimizerState":
        tensors = params.tensors()
        return cls(
            m=[np.zeros_like(t.values) for t in tensors],
            v=[np.zeros_like(t.values) for t in tensors],
        )


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm > 0:
        factor = max_norm / total
        return [g * np.asarray(factor, dtype=g.dtype) for g in grads]
    return grads


def adam_update(params: BackboneParams, grads: list[np.ndarray], state: OptimizerState, lr: float) -> None:
    """Textbook bias-corrected adaptive-moment step, in place."""
    state.step += 1
    t = state.step
    for i, (tensor, g) in enumerate(zip(params.tensors(), grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * (g * g)
        m_hat = state.m[i] / (1 - state.beta1**t)
        v_hat = state.v[i] / (1 - state.beta2**t)
        tensor.values -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(tensor.values.dtype)


@dataclass
class BatchFrame:
    video_id: int
    frame_id: int
    crop: Image  # resized to the arch input
    prior: np.ndarray  # resampled to the feature grid


@dataclass
class Batch:
    videos: list[tuple[BatchFrame, BatchFrame]]

    def digest(self) -> str:
        key = ";".join(
            f"{a.video_id}:{a.frame_id},{b.frame_id}" for a, b in self.videos
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def build_batch(
    data: TrainingData,
    cfg: TrainConfig,
    rng: np.random.Generator,
    feature_hw: tuple[int, int],
) -> Batch:
    """N distinct videos, 2 distinct frames each, uniform without replacement."""
    if len(data) < cfg.n_videos:
        raise ValueError(f"dataset has {len(data)} videos, batch wants {cfg.n_videos}")
    vids = rng.choice(len(data), size=cfg.n_videos, replace=False)
    pairs = []
    fh, fw = feature_hw
    for v in vids:
        video: VideoData = data.videos[int(v)]
        if len(video.frames) < 2:
            raise ValueError(f"video {video.video_id} has fewer than 2 frames")
        fa, fb = rng.choice(len(video.frames), size=2, replace=False)
        pair = tuple(
            BatchFrame(
                video_id=video.video_id,
                frame_id=int(f),
                crop=resize_image(video.frames[int(f)], cfg.crop_size, cfg.crop_size),
                prior=resample_top(video.top_maps[int(f)], fh, fw),
            )
            for f in (fa, fb)
        )
        pairs.append(pair)
    return Batch(videos=pairs)


def _pair_losses(
    z_a: SoftSample,
    z_b: SoftSample,
    lst_a: SoftSample | None,
    lst_b: SoftSample | None,
    negatives: NegativeSet,
    cfg: TrainConfig,
):
    """Loss terms for one query direction; the local terms only in full mode."""
    tau = cfg.socl.tau
    terms = [("global", cl.info_nce(z_a, z_b, negatives, tau))]
    if lst_a is not None and lst_b is not None:
        terms.append(("local_cross", cl.info_nce(z_a, lst_b, negatives, tau)))
        terms.append(("local_self", cl.info_nce(z_a, lst_a, negatives, tau)))
    return terms


def train_step(
    params: BackboneParams,
    opt_state: OptimizerState,
    batch: Batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    lr: float | None = None,
) -> float:
    """One forward/backward/update over a batch; returns the batch loss."""
    mode = cfg.ablation
    use_sns = mode in ("sns", "sns_mixup", "full")
    use_mixup = mode in ("sns_mixup", "full")
    use_lst = mode == "full"

    gst_pairs: list[tuple[SoftSample, SoftSample]] = []
    lst_pairs: list[tuple[SoftSample | None, SoftSample | None]] = []
    sns_all: list[SoftSample] = []
    for frame_a, frame_b in batch.videos:
        feat_a = embed(params, frame_a.crop)
        feat_b = embed(params, frame_b.crop)
        oa = (frame_a.video_id, frame_a.frame_id)
        ob = (frame_b.video_id, frame_b.frame_id)
        z_a = cl.gst(feat_a, frame_a.prior, origin=oa)
        z_b = cl.gst(feat_b, frame_b.prior, origin=ob)
        gst_pairs.append((z_a, z_b))
        if use_sns:
            # both templates query both frames: 4 soft negatives per video
            sns_all.extend(
                cl.sns_pair(feat_a, feat_b, z_a, frame_a.prior, frame_b.prior, cfg.socl, oa, ob)
            )
            sns_all.extend(
                cl.sns_pair(feat_a, feat_b, z_b, frame_a.prior, frame_b.prior, cfg.socl, oa, ob)
            )
        if use_lst:
            theta_a = cl.sample_theta_p(cfg.socl, rng)
            theta_b = cl.sample_theta_p(cfg.socl, rng)
            lst_pairs.append(
                (
                    cl.lst(feat_a, frame_a.prior, theta_a, origin=oa),
                    cl.lst(feat_b, frame_b.prior, theta_b, origin=ob),
                )
            )
        else:
            lst_pairs.append((None, None))

    mixups: list[SoftSample] = []
    if use_mixup:
        for z_a, z_b in gst_pairs:
            mixups.append(cl.mixup_negative(sns_all, z_a, rng, cfg.socl))
            mixups.append(cl.mixup_negative(sns_all, z_b, rng, cfg.socl))

    pair_losses = []
    for (z_a, z_b), (lst_a, lst_b) in zip(gst_pairs, lst_pairs):
        negatives = cl.assemble_negatives(gst_pairs, sns_all, mixups, query_video=z_a.origin[0])
        terms = _pair_losses(z_a, z_b, lst_a, lst_b, negatives, cfg)
        if cfg.symmetrize:
            terms += _pair_losses(z_b, z_a, lst_b, lst_a, negatives, cfg)
        for name, term in terms:
            if not np.isfinite(term.values):
                raise TrainingDivergedError(
                    f"non-finite {name} loss for video {z_a.origin[0]} at step {opt_state.step + 1}"
                )
        total = terms[0][1]
        for _, term in terms[1:]:
            total = ad.add(total, term)
        if cfg.symmetrize:
            total = ad.scale(total, 0.5)
        pair_losses.append(total)

    loss = pair_losses[0]
    for term in pair_losses[1:]:
        loss = ad.add(loss, term)
    loss = ad.scale(loss, 1.0 / len(pair_losses))

    loss.backward()
    grads = [
        t.grad if t.grad is not None else np.zeros_like(t.values) for t in params.tensors()
    ]
    grads = clip_gradients(grads, cfg.grad_clip)
    adam_update(params, grads, opt_state, lr if lr is not None else cfg.learning_rate)
    for t in params.tensors():
        t.grad = None
    return float(loss.values)


# -- optimizer-state sidecar -------------------------------------------------

def save_opt_state(state: OptimizerState, path: str | Path) -> None:
    parts = [OPT_STATE_MAGIC, struct.pack("<II", state.step, len(state.m))]
    for arrs in (state.m, state.v):
        for a in arrs:
            parts.append(struct.pack("<I", a.size))
            parts.append(a.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_opt_state(path: str | Path, params: BackboneParams) -> OptimizerState:
    data = Path(path).read_bytes()
    if data[:4] != OPT_STATE_MAGIC:
        raise ValueError(f"{path}: not an optimizer-state file")
    step, count = struct.unpack_from("<II", data, 4)
    tensors = params.tensors()
    if count != len(tensors):
        raise ValueError(f"{path}: {count} accumulators, parameters want {len(tensors)}")
    pos = 12
    out: list[list[np.ndarray]] = [[], []]
    for slot in range(2):
        for t in tensors:
            (size,) = struct.unpack_from("<I", data, pos)
            pos += 4
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(t.values.shape)
            out[slot].append(arr.astype(t.values.dtype))
            pos += 8 * size
    return OptimizerState(m=out[0], v=out[1], step=step)


@dataclass
class FitResult:
    checkpoint: Path
    metrics: Path
    final_loss: float
    steps_run: int


def step_rngs(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(batch_rng, sample_rng): batch composition never depends on the mode's
    extra draws, so ablations see identical data."""
    return (
        np.random.default_rng([seed, step, 0]),
        np.random.default_rng([seed, step, 1]),
    )


def fit(
    data: TrainingData,
    cfg: TrainConfig,
    out_dir: str | Path,
    arch: tuple[ConvSpec, ...] = DESK_ARCH,
    resume: bool = False,
) -> FitResult:
    """Run the schedule, logging (step, loss, wall_ms) and checkpointing
    periodically; `resume=True` continues from the saved step."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    opt_path = out_dir / "checkpoint.opt"
    metrics_path = out_dir / "metrics.csv"

    if resume and ckpt_path.exists():
        params = load_checkpoint(ckpt_path, arch, dtype=cfg.np_dtype)
        opt_state = load_opt_state(opt_path, params)
        start_step = opt_state.step
        mode = "a"
    else:
        params = init_backbone(arch, seed=cfg.seed, dtype=cfg.np_dtype)
        opt_state = OptimizerState.fresh(params)
        start_step = 0
        mode = "w"

    fh, fw, _ = feature_shape(arch, cfg.crop_size, cfg.crop_size)
    loss_value = float("nan")
    with open(metrics_path, mode, newline="") as fp:
        writer = csv.writer(fp)
        if mode == "w":
            writer.writerow(["step", "loss", "wall_ms"])
        for step in range(start_step + 1, cfg.steps + 1):
            t0 = time.perf_counter()
            batch_rng, sample_rng = step_rngs(cfg.seed, step)
            batch = build_batch(data, cfg, batch_rng, (fh, fw))
            loss_value = train_step(params, opt_state, batch, cfg, sample_rng, lr=cfg.lr_at(step))
            wall_ms = (time.perf_counter() - t0) * 1000.0
            if step % cfg.log_interval == 0:
                writer.writerow([step, f"{loss_value:.6f}", f"{wall_ms:.1f}"])
                fp.flush()
            if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
                save_checkpoint(params, ckpt_path)
                save_opt_state(opt_state, opt_path)
    return FitResult(
        checkpoint=ckpt_path, metrics=metrics_path, final_loss=loss_value, steps_run=cfg.steps - start_step
    )
