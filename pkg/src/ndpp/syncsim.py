"""Simulated data-parallel synchronization of whitening statistics.

Workers are in-process shards of one batch.  Each worker computes raw moment
sums ``X^t X`` plus its row count from its own slice of the data; aggregation
sums the moments in fixed worker order and only then normalizes into a
covariance.  Exchanging moments instead of covariances keeps the aggregate
exact for unequal shard sizes, so whitening from K workers matches whitening
over the concatenated batch to roundoff, at any batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .datamatrix import reshape_for_blocks
from .errors import ContractError
from .layers import NdppLayer, scale_standardize
from .matfun import InverseSqrtResult, regularize
from .tensor import Tensor, as_tensor


@dataclass
class WorkerShard:
    """One worker's contiguous slice of the global batch."""

    worker_id: int
    x_local: Tensor


@dataclass
class LocalMoments:
    """Raw per-block moment sums from one worker."""

    worker_id: int
    xtx: list[Tensor]
    rows: int


@dataclass
class AggregatedMoments:
    """Fixed-order sum of all workers' moments."""

    xtx: list[Tensor]
    rows: int


def shard_batch(x, k_workers: int) -> list[WorkerShard]:
    """Contiguous near-equal row partition; the remainder goes to the earliest workers."""
    x = as_tensor(x)
    n = x.shape[0]
    if k_workers < 1:
        raise ContractError(f"k_workers must be >= 1, got {k_workers}")
    if k_workers > n:
        raise ContractError(f"cannot shard {n} samples across {k_workers} workers")
    base, remainder = divmod(n, k_workers)
    shards = []
    start = 0
    for worker in range(k_workers):
        size = base + (1 if worker < remainder else 0)
        shards.append(WorkerShard(worker_id=worker,
                                  x_local=tn.take_rows(x, start, start + size)))
        start += size
    return shards


def local_moments(shard: WorkerShard, layer: NdppLayer) -> LocalMoments:
    """Per-block ``X^t X`` over the shard, using the layer's statistics path.

    Scale standardization is per-sample, so computing it shard-locally is
    identical to computing it on the full batch.
    """
    if shard.x_local.shape[0] < 1:
        raise ContractError("empty worker shard")
    standardized, _ = scale_standardize(shard.x_local, layer.config.scale_mode)
    dm = layer.data_matrix(standardized, subsample=True)
    parts = reshape_for_blocks(dm, layer.state.blocks)
    xtx = [tn.matmul(tn.transpose(p), p) for p in parts]
    return LocalMoments(worker_id=shard.worker_id, xtx=xtx, rows=dm.shape[0])


def allreduce_moments(moments: list[LocalMoments]) -> AggregatedMoments:
    """Sum worker moments in ascending worker order, independent of arrival order."""
    if not moments:
        raise ContractError("nothing to aggregate")
    ordered = sorted(moments, key=lambda m: m.worker_id)
    shapes = [tuple(t.shape for t in m.xtx) for m in ordered]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ContractError(f"workers disagree on block shapes: {shapes}")
    totals = list(ordered[0].xtx)
    rows = ordered[0].rows
    for m in ordered[1:]:
        totals = [tn.add(acc, extra) for acc, extra in zip(totals, m.xtx)]
        rows += m.rows
    if rows < 1:
        raise ContractError("aggregated row count must be positive")
    return AggregatedMoments(xtx=totals, rows=rows)


def aggregated_covariances(agg: AggregatedMoments, epsilon: float) -> list[Tensor]:
    """Normalize aggregated moments into symmetrized, regularized covariances."""
    covs = []
    for total in agg.xtx:
        cov = tn.scale(total, 1.0 / agg.rows)
        cov = tn.scale(tn.add(cov, tn.transpose(cov)), 0.5)
        covs.append(regularize(cov, epsilon))
    return covs


def fit_whitening_synced(layer: NdppLayer, x, k_workers: int) -> list[InverseSqrtResult]:
    """Fit a layer's whitening state through the simulated worker path."""
    shards = shard_batch(x, k_workers)
    moments = [local_moments(shard, layer) for shard in shards]
    agg = allreduce_moments(moments)
    return layer.fit_from_covariances(aggregated_covariances(agg, layer.config.epsilon))
