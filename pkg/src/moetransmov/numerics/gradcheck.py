"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, no_grad


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    fraction: float = 0.05,
    min_coords: int = 20,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` recomputes a scalar loss from the current parameter values. A random
    ``fraction`` of all coordinates (at least ``min_coords``, at most all of them)
    is probed; each error is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    n = min(len(coords), max(min_coords, int(np.ceil(fraction * len(coords)))))
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(coords), size=n, replace=False)

    worst = 0.0
    with no_grad():
        for c in picked:
            pi, j = coords[c]
            flat = params[pi].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            f_plus = fn().item()
            flat[j] = orig - h
            f_minus = fn().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
