"""16-bit fixed-point weights, activations and the integer GEMM.

Weights are clipped to [-1, 1] and activations to [-16, 16] before scaling by
a power of two and rounding half to even. Products of two int16 values are
summed in int32 and the result is rescaled to float32 once per output cell.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import AccumulatorOverflowError, ShapeError

DEFAULT_FRAC_BITS_W = 10
DEFAULT_FRAC_BITS_A = 10
WEIGHT_CLIP = 1.0
ACTIVATION_CLIP = 16.0

# Reduction dim is zero-padded to whole panels of 16 int16 lanes (one 256-bit
# register); the tag records the panel width so files stay self-describing.
PANEL = 16
LAYOUT_ROW_PANEL16 = 0x5210

_I16_MIN, _I16_MAX = -32768, 32767


def _padded(k):
    return -(-k // PANEL) * PANEL


def _to_fixed(x, clip, frac_bits):
    scaled = np.clip(np.asarray(x, dtype=np.float64), -clip, clip) * (1 << frac_bits)
    return np.clip(np.rint(scaled), _I16_MIN, _I16_MAX).astype(np.int16)


@dataclass(frozen=True, eq=False)
class QuantMatrix:
    """Fixed-point weight matrix in the kernel's row-panel layout.

    ``data`` has shape ``(rows, padded_cols)``; columns past ``cols`` are zero.
    """

    rows: int
    cols: int
    frac_bits_w: int
    data: np.ndarray
    layout_tag: int = LAYOUT_ROW_PANEL16

    def dequantize(self):
        return (self.data[:, : self.cols].astype(np.float32)
                / np.float32(1 << self.frac_bits_w))

    def take_rows(self, ids):
        """Row subset in the same layout (used for output shortlists)."""
        return QuantMatrix(len(ids), self.cols, self.frac_bits_w,
                           np.ascontiguousarray(self.data[ids]), self.layout_tag)

    @property
    def shape(self):
        return (self.rows, self.cols)


@dataclass(frozen=True, eq=False)
class QuantVector:
    """A batch of ``n`` fixed-point activation vectors of length ``len``.

    ``data`` has shape ``(n, padded_len)``, one vector per row.
    """

    len: int
    frac_bits_a: int
    data: np.ndarray

    def dequantize(self):
        out = self.data[:, : self.len].astype(np.float32) / np.float32(1 << self.frac_bits_a)
        return out


def quantize_weights(W, frac_bits_w=DEFAULT_FRAC_BITS_W):
    """Clip to [-1, 1], scale by ``2**frac_bits_w`` and round half to even."""
    if not 8 <= frac_bits_w <= 14:
        raise ValueError(f"frac_bits_w must be in [8, 14], got {frac_bits_w}")
    W = np.asarray(W, dtype=np.float32)
    if W.ndim == 1:
        W = W[None, :]
    rows, cols = W.shape
    data = np.zeros((rows, _padded(cols)), dtype=np.int16)
    data[:, :cols] = _to_fixed(W, WEIGHT_CLIP, frac_bits_w)
    data.setflags(write=False)
    return QuantMatrix(rows, cols, frac_bits_w, data)


def quantize_activations(v, frac_bits_a=DEFAULT_FRAC_BITS_A):
    """Quantize one vector (1-D) or a batch (rows are vectors).

    Values are clipped to [-16, 16]. At ``frac_bits_a=11`` the upper bound
    16 * 2**11 does not fit int16 and saturates to 32767.
    """
    if not 8 <= frac_bits_a <= 11:
        raise ValueError(f"frac_bits_a must be in [8, 11], got {frac_bits_a}")
    v = np.asarray(v, dtype=np.float32)
    if v.ndim == 1:
        v = v[None, :]
    n, k = v.shape
    data = np.zeros((n, _padded(k)), dtype=np.int16)
    _kernels.quantize_rows(np.ascontiguousarray(v), ACTIVATION_CLIP,
                           float(1 << frac_bits_a), data)
    return QuantVector(k, frac_bits_a, data)


def gemm_i16(W, X, check_overflow=False):
    """Fixed-point product ``W @ X`` returning float32 of shape (m, n).

    Args:
        W: :class:`QuantMatrix` of shape (m, k).
        X: :class:`QuantVector` batch holding n vectors of length k.
        check_overflow: run the shadow 64-bit accumulator and raise
            :class:`AccumulatorOverflowError` if any int32 sum wrapped.
    """
    return linear_i16_quantized(W, X, check_overflow).T.copy()


def linear_i16_quantized(W, X, check_overflow=False):
    if W.cols != X.len:
        raise ShapeError(f"gemm_i16: W is {W.shape}, X vectors have length {X.len}")
    if W.data.shape[1] != X.data.shape[1]:
        raise ShapeError("gemm_i16: panel padding differs between operands")
    inv_scale = np.float32(1.0 / (1 << (W.frac_bits_w + X.frac_bits_a)))
    out = np.empty((X.data.shape[0], W.rows), dtype=np.float32)
    if check_overflow:
        bad = _kernels.matmul_i16_nt_checked(W.data, X.data, inv_scale, out)
        if bad:
            raise AccumulatorOverflowError(f"{bad} int32 accumulators overflowed")
    else:
        _kernels.matmul_i16_nt(W.data, X.data, inv_scale, out)
    return out


def linear_i16(W, H, frac_bits_a=DEFAULT_FRAC_BITS_A):
    """Decoder-layout product: quantize rows of float ``H`` and return ``H @ W.T``."""
    return linear_i16_quantized(W, quantize_activations(H, frac_bits_a))
