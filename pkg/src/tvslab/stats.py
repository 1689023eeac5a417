"""Small Monte Carlo summaries with order-stable summation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    count: int

    def agrees(self, target: float, nse: float = 3.0, rel: float = 0.0) -> bool:
        """``|mean - target| <= max(nse * se, rel * |target|)``."""
        return abs(self.mean - target) <= max(nse * self.se, rel * abs(target))

    def z(self, target: float) -> float:
        return (self.mean - target) / self.se if self.se > 0 else math.inf * np.sign(self.mean - target)


def mean_estimate(x) -> Estimate:
    x = np.asarray(x, dtype=float).ravel()
    n = len(x)
    if n == 0:
        raise ValueError("no samples")
    m = math.fsum(x) / n
    if n == 1:
        return Estimate(m, math.inf, 1)
    var = math.fsum((x - m) ** 2) / (n - 1)
    return Estimate(m, math.sqrt(var / n), n)


def complex_estimate(z) -> tuple[Estimate, Estimate]:
    z = np.asarray(z, dtype=complex).ravel()
    return mean_estimate(z.real), mean_estimate(z.imag)


def ks_distance(samples, cdf) -> float:
    """Kolmogorov distance between the empirical law of ``samples`` and ``cdf``.

    ``samples`` may contain ``inf`` (mass escaping every finite time).
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    finite = x[np.isfinite(x)]
    f = np.asarray(cdf(finite), dtype=float)
    i = np.arange(1, len(finite) + 1)
    d_plus = np.max(i / n - f, initial=0.0)
    d_minus = np.max(f - (i - 1) / n, initial=0.0)
    # beyond the last finite sample the empirical cdf stays at len(finite)/n
    tail = 1.0 - len(finite) / n
    return float(max(d_plus, d_minus, tail))


def fit_slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])
