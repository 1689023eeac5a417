"""Direct Brownian first-exit simulation, the brute-force check of the exit law.

Paths start at ``x0`` in ``(0, L)`` and take Gaussian steps whose length
adapts to the distance ``d`` to the nearest end: ``dt = clip((d/6)^2, dt_min,
dt_max)``.  Between grid times the path is a Brownian bridge, and its exit
probability (both ends, method of images) is applied at every step, so the
only discretization error in ``tau`` is the step length at exit, at most
``dt_min`` near the ends.
"""
from __future__ import annotations

import math

import numpy as np

from .analytic import ExitLaw, TvsParams

DT_MIN = 1e-5
DT_MAX = 1e-2


def _bridge_exit(x, y, length, dt):
    # probability that a bridge from x to y (both inside) leaves (0, length); leading images
    lo = np.exp(-2 * x * y / dt)
    hi = np.exp(-2 * (length - x) * (length - y) / dt)
    return np.minimum(1.0, lo + hi)


def simulate_exit_times(
    length: float,
    x0: float,
    paths: int,
    rng: np.random.Generator,
    dt_min: float = DT_MIN,
    dt_max: float = DT_MAX,
    t_max: float = math.inf,
) -> np.ndarray:
    """First exit times of standard BM from ``(0, length)`` started at ``x0``.

    Paths still alive at ``t_max`` get ``inf``.
    """
    if not 0 < x0 < length:
        raise ValueError("x0 must lie inside (0, length)")
    x = np.full(paths, float(x0))
    t = np.zeros(paths)
    tau = np.full(paths, np.inf)
    alive = np.arange(paths)
    while alive.size:
        xa = x[alive]
        d = np.minimum(xa, length - xa)
        dt = np.clip((d / 6) ** 2, dt_min, dt_max)
        y = xa + np.sqrt(dt) * rng.standard_normal(alive.size)
        inside = (y > 0) & (y < length)
        crossed = ~inside
        p = _bridge_exit(xa[inside], y[inside], length, dt[inside])
        hit = rng.random(inside.sum()) < p
        crossed[np.flatnonzero(inside)[hit]] = True
        ta = t[alive] + dt
        # exit inside the step: charge the midpoint
        tau[alive[crossed]] = ta[crossed] - 0.5 * dt[crossed]
        keep = ~crossed
        x[alive[keep]] = y[keep]
        t[alive[keep]] = ta[keep]
        alive = alive[keep]
        if math.isfinite(t_max):
            alive = alive[t[alive] < t_max]
    return tau


def simulate_params(params: TvsParams, paths: int, rng: np.random.Generator, **kw) -> np.ndarray:
    law = ExitLaw.from_params(params)
    return simulate_exit_times(law.length, law.x0, paths, rng, **kw)
