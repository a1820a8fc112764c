"""Forward-only 3D convolution blocks and dense layers in plain numpy.

Feature maps are ``(C, D, D, D)`` arrays. Convolution weights follow the
``(C_out, C_in, k, k, k)`` layout, transposed convolution weights the
``(C_in, C_out, k, k, k)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeError
from ..rng import SeededRng

BN_EPS = 1e-5
# elements of one unrolled input slab
_SLAB_LIMIT = 8_000_000


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int = 2) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding; output side ``D + 2p - k + 1``.

    Unrolls the input one slab of output rows at a time so every slab is a
    single large matrix product.
    """
    cin, d = x.shape[0], x.shape[1]
    cout, cin_w, k = w.shape[0], w.shape[1], w.shape[2]
    if cin != cin_w:
        raise ShapeError(f"conv3d: input has {cin} channels, weights expect {cin_w}")
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    o = d + 2 * padding - k + 1
    wm = w.reshape(cout, cin * k ** 3)
    rows = max(1, _SLAB_LIMIT // (cin * k ** 3 * o * o))
    out = np.empty((cout, o, o, o))
    for x0 in range(0, o, rows):
        x1 = min(o, x0 + rows)
        win = sliding_window_view(xp[:, x0:x1 + k - 1], (k, k, k), axis=(1, 2, 3))
        cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, (x1 - x0) * o * o)
        out[:, x0:x1] = (wm @ cols).reshape(cout, x1 - x0, o, o)
    out += b[:, None, None, None]
    return out


def conv_transpose3d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2,
                     crop: int = 1) -> np.ndarray:
    """Transposed convolution; the full output is cropped by ``crop`` voxels per side.

    With kernel 4, stride 2 and crop 1 the output side is exactly ``2 D``.
    """
    cin, d = x.shape[0], x.shape[1]
    cin_w, cout, k = w.shape[0], w.shape[1], w.shape[2]
    if cin != cin_w:
        raise ShapeError(f"conv_transpose3d: input has {cin} channels, weights expect {cin_w}")
    full = (d - 1) * stride + k
    out = np.zeros((cout, full, full, full))
    xf = x.reshape(cin, -1)
    span = (d - 1) * stride + 1
    for a in range(k):
        for bb in range(k):
            for c in range(k):
                y = (w[:, :, a, bb, c].T @ xf).reshape(cout, d, d, d)
                out[:, a:a + span:stride, bb:bb + span:stride, c:c + span:stride] += y
    out = out[:, crop:full - crop, crop:full - crop, crop:full - crop]
    return out + b[:, None, None, None]


def maxpool3d(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Non-overlapping max pooling; trailing voxels that do not fill a window are dropped."""
    c, d = x.shape[0], x.shape[1]
    o = d // k
    v = x[:, :o * k, :o * k, :o * k].reshape(c, o, k, o, k, o, k)
    return v.max(axis=(2, 4, 6))


def batch_norm(x: np.ndarray, gamma, beta, mean, var, eps: float = BN_EPS) -> np.ndarray:
    """Inference-mode batch norm over axis 0 (channels) or axis 1 for ``(N, C)`` rows."""
    if x.ndim == 2:
        return (x - mean) / np.sqrt(var + eps) * gamma + beta
    shape = (-1,) + (1,) * (x.ndim - 1)
    return ((x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
            * gamma.reshape(shape) + beta.reshape(shape))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / np.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class LazyDense:
    """Dense layer whose weight matrix is regenerated block by block on demand.

    Entries are ``U(-bound, bound)`` drawn from ``rng.child(block)`` for row
    blocks of ``block_rows``. Only the bias is stored. ``bound == 0`` is an
    all-zero weight matrix and skips generation.
    """

    n_in: int
    n_out: int
    rng: SeededRng
    bound: float
    bias: np.ndarray
    block_rows: int = 500

    def __post_init__(self):
        b = np.asarray(self.bias, dtype=np.float64)
        if b.shape != (self.n_out,):
            raise ShapeError(f"bias must have shape ({self.n_out},), got {b.shape}")
        object.__setattr__(self, "bias", b)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_out, self.n_in)

    def weight_block(self, k: int) -> np.ndarray:
        rows = min(self.block_rows, self.n_out - k * self.block_rows)
        g = self.rng.child(int(k)).generator()
        return g.uniform(-self.bound, self.bound, size=(rows, self.n_in))

    def weight(self) -> np.ndarray:
        """Materialize the full matrix (small layers and tests only)."""
        if self.bound == 0:
            return np.zeros(self.shape)
        n_blocks = -(-self.n_out // self.block_rows)
        return np.vstack([self.weight_block(k) for k in range(n_blocks)])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"dense layer expects {self.n_in} inputs, got {x.shape[-1]}")
        out = np.empty(x.shape[:-1] + (self.n_out,))
        if self.bound == 0:
            out[...] = 0.0
        else:
            n_blocks = -(-self.n_out // self.block_rows)
            for k in range(n_blocks):
                a = k * self.block_rows
                blk = self.weight_block(k)
                out[..., a:a + len(blk)] = x @ blk.T
        return out + self.bias


def dense(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray]) -> np.ndarray:
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense layer expects {w.shape[1]} inputs, got {x.shape[-1]}")
    out = x @ w.T
    return out if b is None else out + b
