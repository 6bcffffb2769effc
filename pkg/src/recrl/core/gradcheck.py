"""Central finite-difference checking for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from recrl.core.tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], p: Tensor, eps: float = 1e-4, coords=None) -> np.ndarray:
    """Central differences for the flat ``coords`` of ``p`` (all by default); other entries stay 0."""
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + eps
        hi = fn().item()
        flat[i] = old - eps
        lo = fn().item()
        flat[i] = old
        out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


def max_relative_error(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                       floor: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between analytic and numeric gradients over ``params``.

    Relative error is |a - n| / max(|a| + |n|, floor) elementwise. The floor
    keeps entries whose true gradient is exactly zero from turning float64
    round-off (~1e-12) into a large ratio. With ``max_coords`` each tensor is
    checked on at most that many coordinates drawn without replacement.
    """
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        loss = fn()
    backward(tape, loss, params)
    worst = 0.0
    for p in params:
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, max_coords, replace=False))
        analytic = p.grad.reshape(-1).copy()
        numeric = numeric_grad(fn, p, eps, coords).reshape(-1)
        if coords is not None:
            analytic, numeric = analytic[coords], numeric[coords]
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
