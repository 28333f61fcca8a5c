"""Soft sample generation and the contrastive losses.

A frame's prior map turns its feature map into a global soft template (the
prior-weighted sum of feature rows). Soft negatives aggregate the background
locations that respond most strongly to a template once the prior's target
mass is masked out; local soft templates aggregate only the top prior mass,
mimicking partial occlusion. Negatives for a query pair combine cross-video
templates, all soft negatives in the batch, and mixup interpolations of the
two hardest soft negatives per template.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FeatureMap

GST = "gst"
SNS = "sns"
LST = "lst"
MIXUP = "mixup"


@dataclass(frozen=True)
class ContrastiveConfig:
    theta_b: float = 0.8  # prior mass treated as target when masking backgrounds
    b_p: float = 0.6  # lower bound of the local-template mass threshold
    tau: float = 0.5  # loss temperature
    mixup_lambda: tuple[float, float] = (0.5, 1.0)

    def __post_init__(self):
        if not 0.0 < self.theta_b < 1.0:
            raise ValueError("theta_b must be in (0, 1)")
        if not 0.0 < self.b_p < 1.0:
            raise ValueError("b_p must be in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class SoftSample:
    vector: Tensor  # (C,)
    kind: str
    origin: tuple[int, int]  # (video_id, frame_id)


@dataclass
class CumulativeSelection:
    """Descending sort of a prior map with the minimal prefix reaching a mass
    threshold; `order` is the rank -> flat-location permutation."""

    sorted_scores: np.ndarray
    order: np.ndarray
    q_star: int

    def selected(self) -> np.ndarray:
        return self.order[: self.q_star]


@dataclass
class NegativeSet:
    samples: list[SoftSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def cumulative_select(top: np.ndarray, threshold: float) -> CumulativeSelection:
    """Stable descending sort (ties by ascending location index) and the
    smallest prefix whose mass reaches `threshold`."""
    if not 0.0 < threshold <= 1.0 - 1e-12:
        raise ValueError(f"cumulative threshold {threshold} outside (0, 1)")
    flat = np.asarray(top, dtype=np.float64).ravel()
    order = np.argsort(-flat, kind="stable")
    sorted_scores = flat[order]
    csum = np.cumsum(sorted_scores)
    reached = np.nonzero(csum >= threshold)[0]
    q_star = int(reached[0]) + 1 if len(reached) else flat.size
    return CumulativeSelection(sorted_scores=sorted_scores, order=order, q_star=q_star)


def _check_prior(top: np.ndarray) -> np.ndarray:
    flat = np.asarray(top, dtype=np.float64).ravel()
    if abs(flat.sum() - 1.0) > 1e-6 or np.any(flat < 0):
        raise ValueError("prior map must be a probability distribution over locations")
    return flat


def gst(feat: FeatureMap, top: np.ndarray, origin: tuple[int, int] = (0, 0)) -> SoftSample:
    """Global soft template: prior-weighted sum over feature rows."""
    flat = _check_prior(top)
    if flat.size != feat.h * feat.w:
        raise ValueError(f"prior has {flat.size} cells, features have {feat.h * feat.w}")
    weights = Tensor(flat.reshape(-1, 1).astype(feat.tensor.dtype))
    z = ad.reshape(ad.matmul(ad.transpose2d(feat.as_matrix()), weights), (feat.c,))
    return SoftSample(vector=z, kind=GST, origin=origin)


def similarity_map(feat: FeatureMap, z: Tensor) -> Tensor:
    """Per-location inner product with a template: the 1x1 cross-correlation."""
    if z.shape != (feat.c,):
        raise ValueError(f"template has shape {z.shape}, features carry {feat.c} channels")
    return ad.reshape(ad.matmul(feat.as_matrix(), ad.reshape(z, (feat.c, 1))), (feat.h * feat.w,))


def background_mask(top: np.ndarray, theta_b: float) -> np.ndarray:
    """Boolean flat mask of the target locations (True = masked out)."""
    flat = _check_prior(top)
    sel = cumulative_select(flat, theta_b)
    if sel.q_star >= flat.size:
        raise ValueError("prior map is degenerate: masking leaves no background")
    mask = np.zeros(flat.size, dtype=bool)
    mask[sel.selected()] = True
    return mask


def select_background(g: np.ndarray, top: np.ndarray, theta_b: float) -> np.ndarray:
    """Similarity map with target locations replaced by the -inf sentinel."""
    g = np.asarray(g, dtype=np.float64).ravel()
    flat = _check_prior(top)
    if g.size != flat.size:
        raise ValueError("similarity map and prior map resolutions differ")
    mask = background_mask(flat, theta_b)
    return np.where(mask, np.finfo(g.dtype).min, g)


def _soft_negative(feat: FeatureMap, query: Tensor, top: np.ndarray, theta_b: float,
                   origin: tuple[int, int]) -> SoftSample:
    g = similarity_map(feat, query)
    mask = background_mask(top, theta_b)
    sentinel = float(np.finfo(g.values.dtype).min)
    hhat = ad.softmax(ad.mask_fill(g, mask, sentinel), axis=-1)
    z = ad.reshape(
        ad.matmul(ad.transpose2d(feat.as_matrix()), ad.reshape(hhat, (feat.h * feat.w, 1))),
        (feat.c,),
    )
    return SoftSample(vector=z, kind=SNS, origin=origin)


def sns_pair(
    feat_i: FeatureMap,
    feat_j: FeatureMap,
    z_i: SoftSample,
    top_i: np.ndarray,
    top_j: np.ndarray,
    cfg: ContrastiveConfig,
    origin_i: tuple[int, int] = (0, 0),
    origin_j: tuple[int, int] = (0, 1),
) -> tuple[SoftSample, SoftSample]:
    """Soft negatives for both frames of a video, queried by z_i."""
    if origin_i[0] != z_i.origin[0] or origin_j[0] != z_i.origin[0]:
        raise ValueError("soft negatives must be generated within the query's own video")
    a = _soft_negative(feat_i, z_i.vector, top_i, cfg.theta_b, origin_i)
    b = _soft_negative(feat_j, z_i.vector, top_j, cfg.theta_b, origin_j)
    return a, b


def select_target(top: np.ndarray, theta_p: float) -> np.ndarray:
    """Keep prior mass at the top-mass locations (threshold theta_p), zero the rest."""
    flat = _check_prior(top)
    if theta_p >= 1.0:
        return flat.copy()
    sel = cumulative_select(flat, theta_p)
    out = np.zeros_like(flat)
    keep = sel.selected()
    out[keep] = flat[keep]
    return out


def lst(feat: FeatureMap, top: np.ndarray, theta_p: float,
        origin: tuple[int, int] = (0, 0)) -> SoftSample:
    """Local soft template: sum-normalized top-mass weights over feature rows.

    theta_p = 1 selects every location and skips the (then redundant)
    renormalization, so it reproduces the global template bit for bit.
    """
    flat = _check_prior(top)
    if flat.size != feat.h * feat.w:
        raise ValueError("prior/feature resolution mismatch")
    if theta_p >= 1.0:
        weights = flat
    else:
        kept = select_target(flat, theta_p)
        total = kept.sum()
        if total <= 0:
            raise ValueError("local-template selection has zero mass")
        weights = kept / total
    w = Tensor(weights.reshape(-1, 1).astype(feat.tensor.dtype))
    z = ad.reshape(ad.matmul(ad.transpose2d(feat.as_matrix()), w), (feat.c,))
    return SoftSample(vector=z, kind=LST, origin=origin)


def sample_theta_p(cfg: ContrastiveConfig, rng: np.random.Generator) -> float:
    """Fresh local-template threshold, uniform in [b_p, 1)."""
    return float(rng.uniform(cfg.b_p, 1.0))


def mixup_negative(
    sns_pool: list[SoftSample],
    z_query: SoftSample,
    rng: np.random.Generator,
    cfg: ContrastiveConfig,
) -> SoftSample:
    """Interpolate the two soft negatives most similar to the query template."""
    if len(sns_pool) < 2:
        raise ValueError("mixup needs at least two soft negatives")
    q = z_query.vector.values
    sims = np.array([float(s.vector.values @ q) for s in sns_pool])
    first, second = np.argsort(-sims, kind="stable")[:2]
    lam = float(rng.uniform(*cfg.mixup_lambda))
    z1, z2 = sns_pool[int(first)].vector, sns_pool[int(second)].vector
    mixed = ad.add(ad.scale(z1, lam), ad.scale(z2, 1.0 - lam))
    return SoftSample(vector=mixed, kind=MIXUP, origin=z_query.origin)


def assemble_negatives(
    gst_pairs: list[tuple[SoftSample, SoftSample]],
    sns_all: list[SoftSample],
    mixups: list[SoftSample],
    query_video: int,
) -> NegativeSet:
    """Negatives for one query pair: the other videos' global templates plus
    every soft negative and mixup in the batch. With N videos and the full
    configuration that is 2(N-1) + 4N + 2N = 8N-2 samples."""
    samples: list[SoftSample] = []
    for za, zb in gst_pairs:
        if za.origin[0] == query_video:
            continue
        samples.append(za)
        samples.append(zb)
    samples.extend(sns_all)
    samples.extend(mixups)
    return NegativeSet(samples=samples)


def info_nce(z_query: SoftSample, z_pos: SoftSample, negatives: NegativeSet, tau: float) -> Tensor:
    """-log of the exponentiated positive similarity over the summed
    exponentiated negative similarities (the positive term is not part of
    the denominator), computed via max-subtracted log-sum-exp."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not negatives.samples:
        raise ValueError("empty negative set")
    pos = ad.scale(ad.dot(z_query.vector, z_pos.vector), 1.0 / tau)
    neg_matrix = ad.stack_rows([s.vector for s in negatives.samples])
    c = z_query.vector.shape[0]
    logits = ad.scale(
        ad.reshape(ad.matmul(neg_matrix, ad.reshape(z_query.vector, (c, 1))), (len(negatives),)),
        1.0 / tau,
    )
    return ad.sub(ad.logsumexp(logits), pos)


def total_loss(
    z_i: SoftSample,
    z_j: SoftSample,
    lst_i: SoftSample,
    lst_j: SoftSample,
    negatives: NegativeSet,
    tau: float,
) -> Tensor:
    """Global-to-global plus both global-to-local terms for one query pair."""
    gg = info_nce(z_i, z_j, negatives, tau)
    gl_cross = info_nce(z_i, lst_j, negatives, tau)
    gl_self = info_nce(z_i, lst_i, negatives, tau)
    return ad.add(ad.add(gg, gl_cross), gl_self)
