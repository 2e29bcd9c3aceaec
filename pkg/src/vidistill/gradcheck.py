"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    scalar_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    max_per_param: int | None = None,
    seed: int = 0,
    extrapolate: bool = False,
) -> float:
    """Worst relative error between backprop and ``(f(p+h) - f(p-h)) / 2h``.

    ``max_per_param`` limits how many coordinates of each tensor are probed
    (chosen uniformly at random); ``None`` probes every coordinate.  The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    ``extrapolate`` replaces the difference ``D(h)`` by the Richardson estimate
    ``(4 D(h/2) - D(h)) / 3``, which cancels the O(h^2) truncation term.
    """
    if not 1e-6 <= h <= 1e-2:
        raise ValueError(f"h={h} outside [1e-6, 1e-2]")
    for p in params:
        p.grad = None
    out = scalar_fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("scalar_fn returned a non-finite value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_per_param is None or n <= max_per_param else rng.choice(n, max_per_param, replace=False)
        for i in coords:
            num = _central(scalar_fn, flat, int(i), h)
            if extrapolate:
                num = (4 * _central(scalar_fn, flat, int(i), h / 2) - num) / 3
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def _central(scalar_fn: Callable[[], Tensor], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = float(scalar_fn().data)
    flat[i] = orig - h
    fm = float(scalar_fn().data)
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("scalar_fn returned a non-finite value during probing")
    return (fp - fm) / (2 * h)
