"""Batch covariance, regularization, blocking, and matrix inverse square roots.

Two routes to ``Cov^(-1/2)`` live here.  The production route is the coupled
inverse Newton iteration, which stays inside the differentiation graph so the
whitening correction contributes to gradients.  The validation route is a
cyclic Jacobi eigendecomposition, which is slower but accurate to roundoff
and therefore serves as the oracle for the Newton route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericError
from .tensor import Tensor, as_tensor

# Default maximum block sizes for column partitioning.
FC_BLOCK_SIZE = 256
CONV_BLOCK_CHANNELS = 64

# The coupled iteration contracts only when the scaled spectrum stays inside
# (0, 3); aiming the Gershgorin bound at this value keeps a safety margin
# while leaving well-spread spectra close to 1.
_SPECTRUM_TARGET = 2.2


@dataclass
class CovarianceBlock:
    """One column block's regularized covariance."""

    block_index: int
    cov: Tensor
    epsilon: float


@dataclass
class InverseSqrtResult:
    """Inverse square root of one covariance block plus convergence data."""

    d: Tensor
    iterations_used: int
    residual: float
    converged: bool


def covariance(x) -> Tensor:
    """Uncentered batch covariance ``(1/N) X^t X``, symmetrized exactly."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ContractError(f"covariance expects an N x d matrix, got {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise ContractError("covariance of an empty matrix")
    raw = tn.scale(tn.matmul(tn.transpose(x), x), 1.0 / n)
    return tn.scale(tn.add(raw, tn.transpose(raw)), 0.5)


def regularize(cov: Tensor, epsilon: float) -> Tensor:
    """Add ``epsilon * mean(diag(cov))`` to the diagonal.

    The scaling is relative so the same epsilon works across layers of very
    different magnitudes; an all-zero covariance falls back to an absolute
    ``epsilon * I`` so the result is always invertible for epsilon > 0.
    """
    cov = as_tensor(cov)
    if epsilon < 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ContractError(f"regularize expects a square matrix, got {cov.shape}")
    d = cov.shape[0]
    if epsilon == 0.0:
        return cov
    identity = tn.eye(d, dtype=cov.dtype)
    mean_diag = tn.scale(tn.trace(cov), 1.0 / d)
    if float(mean_diag.data) == 0.0:
        return tn.add(cov, tn.scale(identity, epsilon))
    return tn.add(cov, tn.mul(identity, tn.scale(mean_diag, epsilon)))


def partition_columns(d: int, layer_kind: str = "fully_connected", k: int = 1,
                      block_size: int | None = None) -> list[tuple[int, int]]:
    """Contiguous column ranges covering [0, d), each at most one block wide.

    The default block size is 256 for fully-connected layers and ``64 * k**2``
    for convolution/correlation layers; the last block absorbs the remainder.
    """
    if d < 1:
        raise ContractError(f"d must be >= 1, got {d}")
    if block_size is None:
        if layer_kind == "fully_connected":
            block_size = FC_BLOCK_SIZE
        elif layer_kind in ("convolution", "correlation"):
            block_size = CONV_BLOCK_CHANNELS * k * k
        else:
            raise ContractError(f"unknown layer kind {layer_kind!r}")
    if block_size < 1:
        raise ContractError(f"block size must be >= 1, got {block_size}")
    return [(start, min(start + block_size, d)) for start in range(0, d, block_size)]


def _newton_prescale(cov: Tensor) -> Tensor:
    """Scalar tau so that spectrum(cov / tau) lies safely inside (0, 3).

    ``max(trace/B, gershgorin/2.2)``: the trace term leaves near-identity
    covariances untouched (cov = I stays an exact fixed point), while the
    Gershgorin row-sum bound guarantees the scaled spectrum never leaves the
    contraction region, whatever the conditioning.
    """
    b = cov.shape[0]
    mean_eig = tn.scale(tn.trace(cov), 1.0 / b)
    gersh = tn.amax(tn.reduce_sum(tn.absolute(cov), 1))
    return tn.maximum(mean_eig, tn.scale(gersh, 1.0 / _SPECTRUM_TARGET))


def inverse_sqrt_newton(cov: Tensor, iterations: int = 5) -> InverseSqrtResult:
    """Coupled inverse Newton iteration for the principal inverse square root.

    Starting from ``X = I, M = Cov/tau`` the iteration
    ``X <- X (3I - M)/2,  M <- ((3I - M)/2)^2 M`` drives ``X`` to
    ``(Cov/tau)^(-1/2)``; the result is rescaled by ``1/sqrt(tau)``.  The whole
    computation is recorded in the differentiation graph.  Poor conditioning
    shows up as a large residual and flags ``converged=False`` rather than
    raising; callers log and proceed with the last iterate.
    """
    cov = as_tensor(cov)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ContractError(f"inverse_sqrt_newton expects a square matrix, got {cov.shape}")
    if not np.all(np.isfinite(cov.data)):
        raise NumericError("covariance contains non-finite entries")
    b = cov.shape[0]
    identity = tn.eye(b, dtype=cov.dtype)
    three_i = tn.scale(identity, 3.0)

    tau = _newton_prescale(cov)
    m = tn.div(cov, tau)
    x = identity
    for _ in range(iterations):
        t = tn.scale(tn.sub(three_i, m), 0.5)
        x = tn.matmul(x, t)
        m = tn.matmul(tn.matmul(t, t), m)
    d = tn.div(x, tn.sqrt(tau))

    if not np.all(np.isfinite(d.data)):
        raise NumericError("inverse Newton iteration produced non-finite values")
    residual = float(
        np.linalg.norm(d.data @ cov.data @ d.data - np.eye(b, dtype=cov.dtype))
        / math.sqrt(b)
    )
    return InverseSqrtResult(d=d, iterations_used=iterations,
                             residual=residual, converged=residual <= 0.5)


def jacobi_eigh(matrix, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below ``tol`` times the
    matrix norm.  Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in
    columns, so ``V @ diag(w) @ V.T`` reconstructs the input.
    """
    a = np.array(np.asarray(matrix, dtype=np.float64))
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ContractError(f"jacobi_eigh expects a square matrix, got {a.shape}")
    norm = np.linalg.norm(a)
    if norm > 0 and np.linalg.norm(a - a.T) > 1e-8 * norm:
        raise ContractError("jacobi_eigh expects a symmetric matrix")
    a = (a + a.T) / 2.0
    v = np.eye(n)
    if norm == 0.0:
        return np.zeros(n), v

    for _ in range(max_sweeps):
        strict = a.copy()
        np.fill_diagonal(strict, 0.0)
        off = np.linalg.norm(strict)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                phi = 0.5 * math.atan2(2.0 * apq, a[q, q] - a[p, p])
                c, s = math.cos(phi), math.sin(phi)
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return np.diag(a).copy(), v


def inverse_sqrt_eigen(cov) -> Tensor:
    """Principal inverse square root via the Jacobi oracle (not differentiable)."""
    cov = as_tensor(cov)
    w, v = jacobi_eigh(cov.data)
    if np.any(w <= 0.0):
        raise ContractError(
            f"inverse_sqrt_eigen requires a positive definite matrix; "
            f"smallest eigenvalue {w.min():.3e}"
        )
    d = (v * (w ** -0.5)) @ v.T
    return Tensor((d + d.T) / 2.0, dtype=cov.dtype)


def spd_inverse(matrix) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via the Jacobi oracle."""
    m = np.asarray(matrix, dtype=np.float64)
    w, v = jacobi_eigh(m)
    if np.any(w <= 0.0):
        raise ContractError(
            f"matrix is singular or indefinite; smallest eigenvalue {w.min():.3e}"
        )
    return (v / w) @ v.T
