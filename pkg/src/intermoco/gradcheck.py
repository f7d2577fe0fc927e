"""Central finite-difference verification of backward() gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor, no_grad


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and rebuilds its graph from ``params`` on each
    call. Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every
    checked coordinate. With ``max_coords`` set, at most that many randomly
    chosen coordinates per parameter are perturbed (for large layers).
    """
    if eps <= 0:
        raise UsageError(f"eps must be positive, got {eps}")
    with no_grad():
        first = f().item()
        second = f().item()
    if first != second:
        raise UsageError(f"f is not deterministic: {first!r} != {second!r}")

    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + eps
                plus = f().item()
                flat[idx] = orig - eps
                minus = f().item()
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(grad.reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(err))
    return worst
