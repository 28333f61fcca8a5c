"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Covers exactly the operators the soft-sample losses and the convolutional
embedding need: conv2d, relu, matmul, softmax, dot, elementwise arithmetic
with trailing-axis broadcasting, log/exp, reductions, reshape/transpose and
a stable log-sum-exp. Graphs are built implicitly through parent links and
are single-owner: build, call backward once, discard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A numpy array plus the plumbing to push gradients back to its parents."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node; fan-out gradients sum."""
        if self.values.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.values.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype=np.float64) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _make(values: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(values, requires_grad=_needs_grad(*parents))
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape` (trailing-axis rules)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.values + b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.values.shape))

    out._backward = _backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.values - b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.values.shape))

    out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.values * b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.values, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.values, b.values.shape))

    out._backward = _backward
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _make(x.values * c, (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad * c)

    out._backward = _backward
    return out


def add_const(x: Tensor, c: float) -> Tensor:
    out = _make(x.values + c, (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad)

    out._backward = _backward
    return out


# -- nonlinearities and pointwise maps ----------------------------------

def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.values, 0), (x,))

    def _backward():
        if x.requires_grad:
            # subgradient at 0 is 0
            x._accumulate(out.grad * (x.values > 0))

    out._backward = _backward
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise ValueError("log requires strictly positive input")
    out = _make(np.log(x.values), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad / x.values)

    out._backward = _backward
    return out


def exp(x: Tensor) -> Tensor:
    out = _make(np.exp(x.values), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad * out.values)

    out._backward = _backward
    return out


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = _make(a.values @ b.values, (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ out.grad)

    out._backward = _backward
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"dot expects equal-length vectors, got {a.shape} and {b.shape}")
    out = _make(np.array(a.values @ b.values), (a, b))

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad * b.values)
        if b.requires_grad:
            b._accumulate(out.grad * a.values)

    out._backward = _backward
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ValueError("transpose2d expects a matrix")
    out = _make(x.values.T.copy(), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad.T)

    out._backward = _backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _make(x.values.reshape(shape).copy(), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad.reshape(x.values.shape))

    out._backward = _backward
    return out


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix; backward splits by row."""
    if not tensors:
        raise ValueError("stack_rows needs at least one vector")
    out = _make(np.stack([t.values for t in tensors]), tuple(tensors))

    def _backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(out.grad[i])

    out._backward = _backward
    return out


# -- reductions and normalizers ------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = _make(np.asarray(x.values.sum(axis=axis)), (x,))

    def _backward():
        if not x.requires_grad:
            return
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.values.shape).copy())

    out._backward = _backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,))

    def _backward():
        if x.requires_grad:
            # Jacobian-vector product y * (g - <g, y>) along `axis`
            g = out.grad
            inner = (g * y).sum(axis=axis, keepdims=True)
            x._accumulate(y * (g - inner))

    out._backward = _backward
    return out


def logsumexp(x: Tensor) -> Tensor:
    """Stable scalar log-sum-exp of a vector; backward is softmax(x)."""
    if x.values.ndim != 1:
        raise ValueError("logsumexp expects a vector")
    m = float(x.values.max())
    e = np.exp(x.values - m)
    s = e.sum()
    out = _make(np.array(m + np.log(s)), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(out.grad * (e / s))

    out._backward = _backward
    return out


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace masked entries with a constant; gradient is zero there."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.values.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {x.values.shape}")
    out = _make(np.where(mask, value, x.values), (x,))

    def _backward():
        if x.requires_grad:
            x._accumulate(np.where(mask, 0.0, out.grad))

    out._backward = _backward
    return out


# -- convolution ----------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Valid-range convolution of (C_in, H, W) with (C_out, C_in, kh, kw)."""
    if x.values.ndim != 3 or kernel.values.ndim != 4:
        raise ValueError("conv2d expects (C,H,W) input and (O,C,kh,kw) kernel")
    cin, h, w = x.values.shape
    cout, kcin, kh, kw = kernel.values.shape
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d output would be empty")

    xp = np.pad(x.values, ((0, 0), (pad, pad), (pad, pad))) if pad else x.values
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kernel.values.reshape(cout, cin * kh * kw)
    out_vals = (kmat @ cols.reshape(cin * kh * kw, oh * ow)).reshape(cout, oh, ow)
    out = _make(out_vals, (x, kernel))

    def _backward():
        g2 = out.grad.reshape(cout, oh * ow)
        if kernel.requires_grad:
            dk = g2 @ cols.reshape(cin * kh * kw, oh * ow).T
            kernel._accumulate(dk.reshape(kernel.values.shape))
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(cin, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[:, ki, kj]
            x._accumulate(dxp[:, pad : pad + h, pad : pad + w] if pad else dxp)

    out._backward = _backward
    return out


# -- finite-difference gradient checking ----------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float

    def __str__(self):
        return f"{self.name}: max_rel_err={self.max_rel_err:.3e}"


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom))


def grad_check(build_loss, inputs: list[Tensor], eps: float = 1e-4, name: str = "op") -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    `build_loss` maps the input tensors to a scalar Tensor; it is re-invoked
    for every probe so inputs must be the only state.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = build_loss(*inputs)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.values) for t in inputs]

    worst = 0.0
    for idx, t in enumerate(inputs):
        numeric = np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(build_loss(*inputs).values)
            flat[j] = orig - eps
            lo = float(build_loss(*inputs).values)
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2 * eps)
        worst = max(worst, _rel_err(analytic[idx], numeric))
    return GradCheckReport(name=name, max_rel_err=worst)


def standard_grad_check_suite(seed: int = 0) -> list[GradCheckReport]:
    """One finite-difference case per registered operator, tiny shapes."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    def tpos(*shape):
        return Tensor(rng.random(shape) + 0.5)

    cases = [
        ("add", lambda a, b: tsum(add(a, b)), [t(3, 4), t(3, 4)]),
        ("add_broadcast", lambda a, b: tsum(add(a, b)), [t(2, 3, 4), t(3, 4)]),
        ("sub", lambda a, b: tsum(sub(a, b)), [t(3, 4), t(3, 4)]),
        ("mul", lambda a, b: tsum(mul(a, b)), [t(4, 3), t(4, 3)]),
        ("scale", lambda a: tsum(scale(a, -2.5)), [t(5,)]),
        ("relu", lambda a: tsum(relu(a)), [t(4, 4)]),
        ("log", lambda a: tsum(log(a)), [tpos(6,)]),
        ("exp", lambda a: tsum(exp(a)), [t(6,)]),
        ("matmul", lambda a, b: tsum(matmul(a, b)), [t(3, 4), t(4, 2)]),
        ("dot", lambda a, b: dot(a, b), [t(5,), t(5,)]),
        ("transpose2d", lambda a: tsum(mul(transpose2d(a), transpose2d(a))), [t(3, 4)]),
        ("reshape", lambda a: tsum(exp(reshape(a, (6,)))), [t(2, 3)]),
        ("sum_axis", lambda a: tsum(exp(tsum(a, axis=1))), [t(3, 4)]),
        ("softmax", lambda a: tsum(mul(softmax(a, axis=-1), a)), [t(2, 5)]),
        ("logsumexp", lambda a: logsumexp(a), [t(7,)]),
        ("mask_fill", lambda a: tsum(exp(mask_fill(a, np.arange(6) % 2 == 0, -3.0))), [t(6,)]),
        ("stack_rows", lambda a, b: tsum(exp(stack_rows([a, b]))), [t(4,), t(4,)]),
        ("conv2d_s1", lambda x, k: tsum(conv2d(x, k, stride=1, pad=0)), [t(2, 4, 4), t(3, 2, 3, 3)]),
        ("conv2d_s2p1", lambda x, k: tsum(exp(conv2d(x, k, stride=2, pad=1))), [t(1, 5, 5), t(2, 1, 3, 3)]),
        ("softmax_log", lambda a: scale(log(tsum(mul(softmax(a), exp(a)))), 1.0), [t(6,)]),
    ]
    reports = []
    for name, fn, inputs in cases:
        reports.append(grad_check(fn, inputs, name=name))
    return reports
