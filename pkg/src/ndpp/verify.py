"""Executable property suites and the finite-difference gradient checker.

The suites here are what ``ndpp verify`` runs; the acceptance tests call the
same functions so the CLI and the test suite cannot drift apart.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backprop


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare backprop gradients against central finite differences.

    `fn` must map the given tensors to a scalar tensor.  Returns the worst
    normalized deviation ``max|analytic - numeric| / max(1, max|numeric|)``
    over all inputs with ``requires_grad``.  Inputs are perturbed in place and
    restored, so they must be float64 leaves.
    """
    out = fn(*inputs)
    grads = backprop(out)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = grads[t].data
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            hi = fn(*inputs).item()
            flat[i] = saved - h
            lo = fn(*inputs).item()
            flat[i] = saved
            numeric_flat[i] = (hi - lo) / (2.0 * h)
        scale = max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 1.0)
        deviation = float(np.max(np.abs(analytic - numeric))) / scale if numeric.size else 0.0
        worst = max(worst, deviation)
    return worst
