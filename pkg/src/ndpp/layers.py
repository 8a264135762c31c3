"""Scale-standardized, decorrelated linear transform layers.

The layer computes ``y = (S x) X D w`` where ``S`` standardizes each sample
with its own local statistics and ``D`` is the per-block inverse square root
of the batch covariance of the data matrix.  ``D`` is never applied to the
activations: it is fused into the weights (``(S x) X (D w)``), which is exact
algebra at a fraction of the cost.

During training ``D`` comes from the current batch and stays inside the
differentiation graph; an exponential running average of ``D`` is kept for
evaluation, where batch statistics must not be read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from ._parallel import map_blocks
from .datamatrix import DataMatrix, build_conv, build_corr, build_fc, reshape_for_blocks
from .errors import ContractError, DimensionError
from .matfun import InverseSqrtResult, covariance, inverse_sqrt_newton, partition_columns, regularize
from .tensor import Tensor, as_tensor

LAYER_KINDS = ("fully_connected", "convolution", "correlation")
SCALE_MODES = ("none", "mu_sigma", "l1")

# stabilizer for per-sample statistics denominators
SCALE_DELTA = 1e-8


@dataclass
class ScaleRecord:
    """Per-sample statistics used by one standardization pass."""

    mode: str
    scale: np.ndarray
    shift: np.ndarray | None = None


def scale_standardize(x, mode: str):
    """Standardize each sample tensor with its own local statistics.

    ``mu_sigma`` shifts and scales every sample to mean 0 / std 1; ``l1``
    divides each sample by its mean absolute value; ``none`` is the identity.
    The stabilizer floors each denominator at ``SCALE_DELTA`` rather than
    shifting it: an all-zero sample passes through unchanged, while positive
    rescaling of a live sample cancels to roundoff (an additive stabilizer
    would leave O(delta / scale) leakage).  Returns the transformed tensor and
    a record of the statistics.
    """
    x = as_tensor(x)
    if mode not in SCALE_MODES:
        raise ContractError(f"unknown scale mode {mode!r}")
    if mode == "none":
        return x, ScaleRecord(mode=mode, scale=np.ones(x.shape[0], dtype=x.dtype))
    axes = tuple(range(1, x.ndim))
    if mode == "mu_sigma":
        mu = tn.sample_mean(x)
        centered = tn.sub(x, tn.expand_over(mu, x.shape, axes))
        sd = tn.sqrt(tn.sample_mean(tn.mul(centered, centered)))
        floored = tn.maximum(sd, SCALE_DELTA)
        out = tn.div(centered, tn.expand_over(floored, x.shape, axes))
        return out, ScaleRecord(mode=mode, scale=sd.data.copy(), shift=mu.data.copy())
    norm = tn.sample_mean(tn.absolute(x))
    floored = tn.maximum(norm, SCALE_DELTA)
    out = tn.div(x, tn.expand_over(floored, x.shape, axes))
    return out, ScaleRecord(mode=mode, scale=norm.data.copy())


@dataclass
class NdppLayerConfig:
    """Geometry plus transform options of one layer."""

    layer_kind: str
    in_size: int
    out_size: int
    kernel: int = 1
    padding: int = 0
    stride: int = 1
    spatial_dims: int = 2
    scale_mode: str = "none"
    block_size: int | None = None
    subsample_stride: int = 1
    epsilon: float = 1e-5
    running_momentum: float = 0.9
    newton_iterations: int = 5
    with_bias: bool = False

    def validate(self) -> None:
        if self.layer_kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.layer_kind!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ContractError(f"unknown scale mode {self.scale_mode!r}")
        if self.in_size < 1 or self.out_size < 1 or self.kernel < 1:
            raise ContractError("layer sizes and kernel must be >= 1")
        if self.block_size is not None and self.block_size < 1:
            raise ContractError("block_size must be >= 1")
        if self.subsample_stride < 1 or self.stride < 1:
            raise ContractError("strides must be >= 1")
        if self.padding < 0:
            raise ContractError("padding must be >= 0")
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if not 0.0 <= self.running_momentum <= 1.0:
            raise ContractError("running momentum must lie in [0, 1]")
        if self.newton_iterations < 1:
            raise ContractError("newton_iterations must be >= 1")
        if self.spatial_dims not in (1, 2):
            raise ContractError("spatial_dims must be 1 or 2")

    @property
    def input_columns(self) -> int:
        """Width d of the layer's data matrix."""
        if self.layer_kind == "fully_connected":
            return self.in_size + (1 if self.with_bias else 0)
        return self.in_size * self.kernel ** self.spatial_dims


@dataclass
class WhiteningState:
    """Batch-time and evaluation-time decorrelation blocks of one layer."""

    blocks: list[tuple[int, int]]
    batch_d: list[Tensor] | None = None
    running_d: list[np.ndarray] | None = None
    mode: str = "training"


class NdppLayer:
    """One linear transform layer wrapped in the whitening feature transform."""

    def __init__(self, config: NdppLayerConfig, rng: np.random.Generator | int = 0):
        config.validate()
        self.config = config
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        d = config.input_columns
        bound = 1.0 / np.sqrt(d)
        self.weight = tn.parameter(rng.uniform(-bound, bound, size=(d, config.out_size)))
        self.bias: Tensor | None = None
        if config.with_bias and config.layer_kind != "fully_connected":
            self.bias = tn.parameter(np.zeros(config.out_size))
        self.state = WhiteningState(
            blocks=partition_columns(d, config.layer_kind, config.kernel, config.block_size))
        self._flip: np.ndarray | None = None
        if config.layer_kind == "convolution":
            self._flip = _kernel_flip_indices(config)

    @property
    def training(self) -> bool:
        return self.state.mode == "training"

    def set_mode(self, mode: str) -> None:
        if mode not in ("training", "evaluation"):
            raise ContractError(f"mode must be 'training' or 'evaluation', got {mode!r}")
        self.state.mode = mode

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    # -- statistics ------------------------------------------------------

    def data_matrix(self, x, subsample: bool) -> DataMatrix:
        cfg = self.config
        s = cfg.subsample_stride if subsample else 1
        if cfg.layer_kind == "fully_connected":
            return build_fc(x, with_bias=cfg.with_bias)
        if cfg.layer_kind == "convolution":
            return build_conv(x, cfg.kernel, pad=cfg.padding, stride_conv=cfg.stride, s=s)
        return build_corr(x, cfg.kernel, s=s)

    def block_covariances(self, x) -> list[Tensor]:
        """Regularized per-block covariance of the standardized data matrix."""
        standardized, _ = scale_standardize(x, self.config.scale_mode)
        dm = self.data_matrix(standardized, subsample=True)
        parts = reshape_for_blocks(dm, self.state.blocks)
        return [regularize(covariance(p), self.config.epsilon) for p in parts]

    def fit_whitening(self, x) -> list[InverseSqrtResult]:
        """Compute batch decorrelation blocks and refresh the running average.

        The inverse square roots are recorded in the differentiation graph, so
        gradients flowing out of the layer see the covariance computation.
        """
        if not self.training:
            raise ContractError("fit_whitening requires training mode")
        return self.fit_from_covariances(self.block_covariances(x))

    def fit_from_covariances(self, covs: list[Tensor]) -> list[InverseSqrtResult]:
        """Fit from externally supplied per-block covariances (statistics sync)."""
        if len(covs) != len(self.state.blocks):
            raise ContractError("covariance block count does not match the layer")
        results = map_blocks(
            lambda cov: inverse_sqrt_newton(cov, self.config.newton_iterations), covs)
        self.state.batch_d = [r.d for r in results]
        rho = self.config.running_momentum
        if self.state.running_d is None:
            self.state.running_d = [r.d.data.copy() for r in results]
        else:
            self.state.running_d = [
                rho * old + (1.0 - rho) * r.d.data
                for old, r in zip(self.state.running_d, results)]
        return results

    # -- forward -----------------------------------------------------------

    def _decorrelation_blocks(self) -> list[Tensor]:
        if self.training:
            if self.state.batch_d is None:
                raise ContractError("training forward before fit_whitening")
            return self.state.batch_d
        if self.state.running_d is None:
            raise ContractError("evaluation forward before any fit_whitening")
        return [Tensor(d) for d in self.state.running_d]

    def _effective_weight(self) -> Tensor:
        if self._flip is None:
            return self.weight
        out = self.config.out_size
        idx = self._flip[:, None] * out + np.arange(out)[None, :]
        return tn.take_flat(self.weight, idx)

    def fused_weight(self) -> Tensor:
        """``D w`` assembled block-by-block along the weight's input dimension."""
        w = self._effective_weight()
        pieces = [
            tn.matmul(d, tn.take_rows(w, lo, hi))
            for d, (lo, hi) in zip(self._decorrelation_blocks(), self.state.blocks)]
        return pieces[0] if len(pieces) == 1 else tn.concat(pieces, axis=0)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        standardized, _ = scale_standardize(x, self.config.scale_mode)
        dm = self.data_matrix(standardized, subsample=False)
        y = tn.matmul(dm.values, self.fused_weight())
        if self.config.layer_kind == "fully_connected":
            return y
        n, out = dm.n_samples, self.config.out_size
        y = tn.reshape(y, (n, *dm.grid, out))
        y = tn.permute(y, (0, y.ndim - 1, *range(1, y.ndim - 1)))
        if self.bias is not None:
            y = tn.add(y, tn.expand_over(self.bias, y.shape,
                                         (0, *range(2, y.ndim))))
        return y

    __call__ = forward


def _kernel_flip_indices(config: NdppLayerConfig) -> np.ndarray:
    """Row permutation mapping kernel-order weights to data-matrix columns.

    The data matrix unrolls windows in natural order, so a convolution (which
    slides the reversed kernel) multiplies it with the spatially flipped
    weights; the flip stays inside each channel group.
    """
    k, dims, channels = config.kernel, config.spatial_dims, config.in_size
    window = k ** dims
    if dims == 1:
        flip = np.arange(k)[::-1]
    else:
        flip = (np.arange(k * k).reshape(k, k)[::-1, ::-1]).reshape(-1)
    return (np.arange(channels)[:, None] * window + flip[None, :]).reshape(-1)


# -- layer state serialization ---------------------------------------------
#
# Flat binary container, little-endian throughout:
#   magic "NDPP" | u32 version | u32 layer count
# then per layer, fields in NdppLayerConfig declaration order:
#   u8 layer_kind | u32 in_size | u32 out_size | u32 kernel | u32 padding
#   u32 stride | u8 spatial_dims | u8 scale_mode | i64 block_size (-1 = auto)
#   u32 subsample_stride | f64 epsilon | f64 running_momentum
#   u32 newton_iterations | u8 with_bias
#   u32 rows | u32 cols | rows*cols f64   (weight, row-major)
#   u8 has_bias | [u32 n | n f64]
#   u32 n_blocks | per block: u32 start | u32 stop
#   u8 has_running | [per block: (stop-start)^2 f64, row-major]

MAGIC = b"NDPP"
FORMAT_VERSION = 1


def save_layer_states(path, layers: list[NdppLayer]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(layers)))
        for layer in layers:
            cfg = layer.config
            fh.write(struct.pack(
                "<BIIIIIBBqIddIB",
                LAYER_KINDS.index(cfg.layer_kind), cfg.in_size, cfg.out_size,
                cfg.kernel, cfg.padding, cfg.stride, cfg.spatial_dims,
                SCALE_MODES.index(cfg.scale_mode),
                -1 if cfg.block_size is None else cfg.block_size,
                cfg.subsample_stride, cfg.epsilon, cfg.running_momentum,
                cfg.newton_iterations, int(cfg.with_bias)))
            w = layer.weight.data
            fh.write(struct.pack("<II", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            if layer.bias is None:
                fh.write(struct.pack("<B", 0))
            else:
                fh.write(struct.pack("<BI", 1, layer.bias.data.size))
                fh.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", len(layer.state.blocks)))
            for lo, hi in layer.state.blocks:
                fh.write(struct.pack("<II", lo, hi))
            running = layer.state.running_d
            fh.write(struct.pack("<B", 0 if running is None else 1))
            if running is not None:
                for block in running:
                    fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_layer_states(path) -> list[NdppLayer]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ContractError("not a layer state container")
    offset = 4

    def unpack(fmt):
        nonlocal offset
        values = struct.unpack_from(fmt, raw, offset)
        offset += struct.calcsize(fmt)
        return values

    def floats(count):
        nonlocal offset
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        return arr

    version, n_layers = unpack("<II")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported layer state version {version}")
    layers = []
    for _ in range(n_layers):
        (kind, in_size, out_size, kernel, padding, stride, spatial_dims,
         scale_mode, block_size, subsample, epsilon, momentum,
         iterations, with_bias) = unpack("<BIIIIIBBqIddIB")
        config = NdppLayerConfig(
            layer_kind=LAYER_KINDS[kind], in_size=in_size, out_size=out_size,
            kernel=kernel, padding=padding, stride=stride,
            spatial_dims=spatial_dims, scale_mode=SCALE_MODES[scale_mode],
            block_size=None if block_size < 0 else block_size,
            subsample_stride=subsample, epsilon=epsilon,
            running_momentum=momentum, newton_iterations=iterations,
            with_bias=bool(with_bias))
        layer = NdppLayer(config)
        rows, cols = unpack("<II")
        layer.weight = tn.parameter(floats(rows * cols).reshape(rows, cols))
        (has_bias,) = unpack("<B")
        if has_bias:
            (n,) = unpack("<I")
            layer.bias = tn.parameter(floats(n))
        else:
            layer.bias = None
        (n_blocks,) = unpack("<I")
        blocks = [tuple(unpack("<II")) for _ in range(n_blocks)]
        layer.state.blocks = blocks
        (has_running,) = unpack("<B")
        if has_running:
            layer.state.running_d = [
                floats((hi - lo) ** 2).reshape(hi - lo, hi - lo) for lo, hi in blocks]
        layers.append(layer)
    return layers
