"""Construction of the N x d data matrix for linear transform layers.

Each row of the matrix is one unrolled input window (one sample for a
fully-connected layer), so the layer's transform becomes a plain matrix
product against the unrolled weights.  Columns are grouped channel-major,
with window entries in row-major spatial order inside each group, which
keeps per-channel covariance blocks contiguous.

Construction goes through a single differentiable gather, so data matrices
participate in the differentiation graph of whatever consumes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor

_INDEX_CACHE: dict[tuple, tuple[np.ndarray, tuple[int, ...]]] = {}


@dataclass
class DataMatrix:
    """Unrolled windows of one layer input batch.

    ``grid`` is the per-sample output grid that the rows sweep (empty for
    fully-connected layers); rows are ordered sample-major, then row-major
    over the grid.
    """

    values: Tensor
    layer_kind: str
    channels: int
    kernel: int
    subsample_stride: int
    n_samples: int
    grid: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def build_fc(x, with_bias: bool = False) -> DataMatrix:
    """Data matrix of a fully-connected layer: the input itself, optionally
    augmented with an all-ones bias column."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"build_fc expects an N x d input, got {x.shape}")
    values = x
    if with_bias:
        ones = Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
        values = tn.concat([x, ones], axis=1)
    return DataMatrix(values=values, layer_kind="fully_connected", channels=1,
                      kernel=1, subsample_stride=1, n_samples=x.shape[0], grid=())


def _window_indices(shape: tuple[int, ...], k: int, pad: int, stride: int,
                    s: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Flat gather indices into the zero-padded batch buffer.

    Returns ``(indices of shape (N * rows, d), output grid)`` where rows sweep
    the (possibly subsampled) output grid of one sample.
    """
    key = (shape, k, pad, stride, s)
    cached = _INDEX_CACHE.get(key)
    if cached is not None:
        return cached

    if len(shape) == 3:
        n, c, length = shape
        lp = length + 2 * pad
        if lp < k:
            raise DimensionError(f"kernel {k} larger than padded length {lp}")
        l_out = (lp - k) // stride + 1
        oi = np.arange(0, l_out, s)
        # index layout: rows (oi), columns (c, di)
        idx = (np.arange(c)[None, :, None] * lp
               + oi[:, None, None] * stride
               + np.arange(k)[None, None, :])
        idx = idx.reshape(len(oi), c * k)
        grid = (len(oi),)
        sample_size = c * lp
    elif len(shape) == 4:
        n, c, h, w = shape
        hp, wp = h + 2 * pad, w + 2 * pad
        if hp < k or wp < k:
            raise DimensionError(f"kernel {k} larger than padded input {hp}x{wp}")
        h_out = (hp - k) // stride + 1
        w_out = (wp - k) // stride + 1
        oi = np.arange(0, h_out, s)
        oj = np.arange(0, w_out, s)
        # rows (oi, oj) row-major; columns (c, di, dj) channel-major
        idx = (np.arange(c)[None, None, :, None, None] * (hp * wp)
               + (oi[:, None, None, None, None] * stride
                  + np.arange(k)[None, None, None, :, None]) * wp
               + (oj[None, :, None, None, None] * stride
                  + np.arange(k)[None, None, None, None, :]))
        idx = idx.reshape(len(oi) * len(oj), c * k * k)
        grid = (len(oi), len(oj))
        sample_size = c * hp * wp
    else:
        raise DimensionError(f"expected (N,C,L) or (N,C,H,W) input, got {shape}")

    offsets = np.arange(n) * sample_size
    full = (offsets[:, None, None] + idx[None, :, :]).reshape(n * idx.shape[0], idx.shape[1])
    result = (full, grid)
    _INDEX_CACHE[key] = result
    return result


def build_conv(x, k: int, pad: int = 0, stride_conv: int = 1, s: int = 1) -> DataMatrix:
    """Data matrix of a convolution layer over a 1-d or 2-d spatial input.

    Rows are the layer's output locations sampled with stride ``s`` on the
    output grid (origin 0, both axes); ``s > 1`` is used to cheapen covariance
    estimation only.  Padding inserts zeros.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"build_conv expects (N,C,L) or (N,C,H,W), got {x.shape}")
    if k < 1 or stride_conv < 1 or s < 1 or pad < 0:
        raise ContractError("kernel/strides must be >= 1 and pad >= 0")
    idx, grid = _window_indices(x.shape, k, pad, stride_conv, s)
    padded = tn.pad_spatial(x, pad)
    values = tn.take_flat(padded, idx)
    return DataMatrix(values=values, layer_kind="convolution", channels=x.shape[1],
                      kernel=k, subsample_stride=s, n_samples=x.shape[0], grid=grid)


def build_corr(x, k: int, s: int = 1) -> DataMatrix:
    """Data matrix of a correlation (transposed convolution) layer.

    Identical to the convolution matrix except the padding is pinned at
    ``k - 1`` per side ('full' mode); whether the kernel is flipped is the
    layer's concern, not the data matrix's.
    """
    dm = build_conv(x, k, pad=k - 1, stride_conv=1, s=s)
    dm.layer_kind = "correlation"
    return dm


def reshape_for_blocks(x, blocks: list[tuple[int, int]]) -> list[Tensor]:
    """Column slices per block; their horizontal concat restores the input."""
    values = x.values if isinstance(x, DataMatrix) else as_tensor(x)
    if values.ndim != 2:
        raise ContractError(f"expected an N x d matrix, got {values.shape}")
    d = values.shape[1]
    cursor = 0
    for start, stop in blocks:
        if start != cursor or stop <= start:
            raise ContractError(f"blocks must tile [0, {d}) contiguously, got {blocks}")
        cursor = stop
    if cursor != d:
        raise ContractError(f"blocks cover [0, {cursor}) but the matrix has {d} columns")
    return [tn.take_columns(values, start, stop) for start, stop in blocks]
