"""Dense float32 kernels: GEMM, softmax, activations and elementwise ops.

A "tensor" throughout the package is a C-contiguous ``float32`` numpy array
with one or two dimensions. Helpers here validate and normalise inputs; the
arithmetic itself runs in :mod:`fastnmt._kernels`.
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.special import expit

from . import _kernels
from .exceptions import ShapeError

RELU_CAP = 10.0

LUT_SIZE = 4096
LUT_DOMAINS = {"sigmoid": (-16.0, 16.0), "tanh": (-8.0, 8.0)}


class ActivationKind(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU_CLIPPED = "relu-clipped"


def as_tensor(x, name="tensor", ndim=None):
    """Return ``x`` as a contiguous float32 array, checking shape and finiteness.

    Args:
        x: array-like input.
        name: label used in error messages.
        ndim: required number of dimensions, or None for 1 or 2.

    Raises:
        ShapeError: wrong rank or non-finite values.
    """
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-D, got shape {arr.shape}")
    if arr.ndim not in (1, 2):
        raise ShapeError(f"{name}: tensors are 1-D or 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name}: contains NaN or Inf")
    return arr


def matmul_nt(W, H, out=None):
    """Batched ``W @ h`` for each row ``h`` of ``H``; returns ``H @ W.T``.

    This is the decoder's layout: ``W`` is (m, k) row-major as stored in the
    model and ``H`` holds one activation vector per row.
    """
    m, k = W.shape
    if H.shape[1] != k:
        raise ShapeError(f"inner dimensions differ: W is {W.shape}, H is {H.shape}")
    if out is None:
        out = np.empty((H.shape[0], m), dtype=np.float32)
    _kernels.matmul_f32_nt(W, np.ascontiguousarray(H, dtype=np.float32), out)
    return out


def gemm_f32(A, B):
    """Reference float32 matrix product ``A @ B``.

    Each output cell is summed left to right over the inner index, so the
    result is reproducible bit for bit and independent of the shape of ``B``.

    Raises:
        ShapeError: inner dimensions disagree.
    """
    A = as_tensor(A, "A", ndim=2)
    B = as_tensor(B, "B", ndim=2)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"gemm_f32: {A.shape} x {B.shape}")
    out = np.empty((B.shape[1], A.shape[0]), dtype=np.float32)
    _kernels.matmul_f32_nt(A, np.ascontiguousarray(B.T), out)
    return np.ascontiguousarray(out.T)


def softmax(v):
    """Row-wise softmax with max subtraction."""
    v = as_tensor(v, "v")
    if v.size == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v):
    """Row-wise log-softmax, ``v - logsumexp(v)``."""
    v = np.asarray(v, dtype=np.float32)
    if v.size == 0 or v.shape[-1] == 0:
        raise ShapeError("log_softmax of an empty vector")
    mx = v.max(axis=-1, keepdims=True)
    z = v - mx
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _exact(kind, x):
    if kind is ActivationKind.SIGMOID:
        return expit(x)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    return np.clip(x, np.float32(0.0), np.float32(RELU_CAP))


@dataclass(frozen=True, eq=False)
class LookupTable:
    """Linearly interpolated table for a smooth activation.

    Inputs outside ``[domain_lo, domain_hi]`` take the boundary entry.
    """

    kind: ActivationKind
    domain_lo: float
    domain_hi: float
    entries: np.ndarray
    step: float

    @classmethod
    def build(cls, kind, size=LUT_SIZE, domain=None):
        kind = ActivationKind(kind)
        if kind is ActivationKind.RELU_CLIPPED:
            raise ValueError("relu-clipped is piecewise linear; no table needed")
        if size < 1024:
            raise ValueError("lookup tables need at least 1024 entries")
        lo, hi = domain if domain is not None else LUT_DOMAINS[kind.value]
        grid = np.linspace(lo, hi, size, dtype=np.float64)
        entries = _exact(kind, grid).astype(np.float32)
        entries.setflags(write=False)
        return cls(kind, float(lo), float(hi), entries, (hi - lo) / (size - 1))

    @property
    def inv_step(self):
        return np.float32(1.0 / self.step)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float32)
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _kernels.lut_apply(self.entries, np.float32(self.domain_lo), self.inv_step, flat, out)
        return out.reshape(x.shape)


@lru_cache(maxsize=None)
def default_table(kind):
    """Shared immutable table for ``kind`` ('sigmoid' or 'tanh')."""
    return LookupTable.build(ActivationKind(kind))


def activate(kind, v, mode="exact", table=None):
    """Apply an activation elementwise.

    Args:
        kind: an :class:`ActivationKind` or its string value.
        v: input tensor.
        mode: ``"exact"`` or ``"lut"``. Clipped relu is exact in both modes.
        table: optional prebuilt table; defaults to the shared one.
    """
    kind = ActivationKind(kind)
    v = np.asarray(v, dtype=np.float32)
    if mode == "exact" or kind is ActivationKind.RELU_CLIPPED:
        return np.asarray(_exact(kind, v), dtype=np.float32)
    if mode != "lut":
        raise ValueError(f"unknown activation mode {mode!r}")
    table = table if table is not None else default_table(kind.value)
    if table.kind is not kind:
        raise ValueError(f"table is for {table.kind.value}, not {kind.value}")
    return table(v)


def vec_binary(op, a, b, fast=True):
    """Elementwise ``add`` or ``mul`` of equal-shaped tensors.

    ``fast=False`` runs a plain per-element Python loop; both paths give
    bitwise-identical float32 results.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeError(f"vec_binary: shapes {a.shape} and {b.shape} differ")
    if op not in ("add", "mul"):
        raise ValueError(f"unknown op {op!r}")
    fa = np.ascontiguousarray(a).reshape(-1)
    fb = np.ascontiguousarray(b).reshape(-1)
    out = np.empty_like(fa)
    if fast:
        (_kernels.vec_add if op == "add" else _kernels.vec_mul)(fa, fb, out)
    else:
        for i in range(fa.shape[0]):
            x, y = fa[i], fb[i]
            out[i] = x + y if op == "add" else x * y
    return out.reshape(a.shape)
