"""The embedding network: a small strided conv stack mapping a crop to an
H x W x C feature map, plus checkpoint I/O.

No projection head anywhere: the representation that the loss sees is the
representation the tracker correlates with.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import Image

CHECKPOINT_MAGIC = b"SOCL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    pad: int


# 96x96 crop -> 46 -> 22 -> 10 -> 10 feature cells, 32 channels
DESK_ARCH: tuple[ConvSpec, ...] = (
    ConvSpec(3, 16, 5, 2, 0),
    ConvSpec(16, 32, 3, 2, 0),
    ConvSpec(32, 32, 3, 2, 0),
    ConvSpec(32, 32, 3, 1, 1),
)


@dataclass
class BackboneParams:
    arch: tuple[ConvSpec, ...]
    kernels: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.append(k)
            out.append(b)
        return out

    @property
    def out_channels(self) -> int:
        return self.arch[-1].out_ch


@dataclass
class FeatureMap:
    """Feature tensor (C, H, W) with a cached location-major (HW, C) view."""

    tensor: Tensor

    def __post_init__(self):
        self._matrix = None

    @property
    def c(self) -> int:
        return self.tensor.shape[0]

    @property
    def h(self) -> int:
        return self.tensor.shape[1]

    @property
    def w(self) -> int:
        return self.tensor.shape[2]

    def as_matrix(self) -> Tensor:
        if self._matrix is None:
            c, h, w = self.tensor.shape
            self._matrix = ad.transpose2d(ad.reshape(self.tensor, (c, h * w)))
        return self._matrix


def validate_arch(arch: tuple[ConvSpec, ...]) -> None:
    if not arch:
        raise ValueError("architecture needs at least one layer")
    for prev, cur in zip(arch, arch[1:]):
        if prev.out_ch != cur.in_ch:
            raise ValueError(
                f"layer channel mismatch: {prev.out_ch} out feeds {cur.in_ch} in"
            )
    for spec in arch:
        if spec.kernel < 1 or spec.stride < 1 or spec.pad < 0:
            raise ValueError(f"bad layer spec {spec}")


def feature_shape(arch: tuple[ConvSpec, ...], in_h: int, in_w: int) -> tuple[int, int, int]:
    """(H, W, C) after the conv chain; raises if any layer collapses."""
    h, w = in_h, in_w
    for spec in arch:
        h = ad.conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        w = ad.conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if h < 1 or w < 1:
            raise ValueError(f"input {in_h}x{in_w} collapses at layer {spec}")
    return h, w, arch[-1].out_ch


def init_backbone(
    arch: tuple[ConvSpec, ...] = DESK_ARCH, seed: int = 0, dtype=np.float64
) -> BackboneParams:
    """He-uniform kernels (bound sqrt(6/fan_in)), zero biases; deterministic per seed."""
    validate_arch(arch)
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for spec in arch:
        fan_in = spec.in_ch * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        k = rng.uniform(-bound, bound, size=(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
        kernels.append(Tensor(k.astype(dtype), requires_grad=True))
        biases.append(Tensor(np.zeros((spec.out_ch, 1, 1), dtype=dtype), requires_grad=True))
    return BackboneParams(arch=arch, kernels=kernels, biases=biases)


def normalize_crop(crop: Image | np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 (h, w[, 3]) pixels -> (C, h, w) in [-1, 1]."""
    px = crop.pixels if isinstance(crop, Image) else np.asarray(crop)
    if px.ndim == 2:
        px = px[:, :, None]
    arr = (px.astype(dtype) - 127.5) / 127.5
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def embed(params: BackboneParams, crop: Image | np.ndarray) -> FeatureMap:
    """Differentiable forward pass; relu between layers, linear final output."""
    dtype = params.kernels[0].values.dtype
    x = Tensor(normalize_crop(crop, dtype=dtype))
    if x.shape[0] != params.arch[0].in_ch:
        raise ValueError(f"crop has {x.shape[0]} channels, arch wants {params.arch[0].in_ch}")
    feature_shape(params.arch, x.shape[1], x.shape[2])  # reject collapsing sizes up front
    n = len(params.arch)
    for i, spec in enumerate(params.arch):
        x = ad.add(ad.conv2d(x, params.kernels[i], spec.stride, spec.pad), params.biases[i])
        if i < n - 1:
            x = ad.relu(x)
    return FeatureMap(x)


# -- checkpoint I/O --------------------------------------------------------

def _write_array(parts: list[bytes], arr: np.ndarray) -> None:
    parts.append(struct.pack("<I", arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.astype("<f4").tobytes())


def save_checkpoint(params: BackboneParams, path: str | Path) -> None:
    """Magic + version + layer count, then per layer the kernel and bias as
    (ndim, dims..., f32 rows), all little-endian."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.arch))]
    for k, b in zip(params.kernels, params.biases):
        _write_array(parts, k.values)
        _write_array(parts, b.values)
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def _read_array(data: bytes, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    count = int(np.prod(shape))
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr, pos + 4 * count


def load_checkpoint(
    path: str | Path, arch: tuple[ConvSpec, ...] = DESK_ARCH, dtype=np.float32
) -> BackboneParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if n_layers != len(arch):
        raise CheckpointError(f"{path}: {n_layers} layers, descriptor wants {len(arch)}")
    pos = 12
    kernels, biases = [], []
    for spec in arch:
        k, pos = _read_array(data, pos)
        b, pos = _read_array(data, pos)
        want_k = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        if k.shape != want_k:
            raise CheckpointError(f"{path}: kernel shape {k.shape} != descriptor {want_k}")
        if b.shape != (spec.out_ch, 1, 1):
            raise CheckpointError(f"{path}: bias shape {b.shape} mismatch")
        kernels.append(Tensor(k.astype(dtype), requires_grad=True))
        biases.append(Tensor(b.astype(dtype), requires_grad=True))
    return BackboneParams(arch=arch, kernels=kernels, biases=biases)
