"""Statistics of extracted two-valued sets: box counting, hitting
probabilities, the Minkowski-content measure and related functionals."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .analytic import InvalidParameters, TvsParams, disc_conformal_radius, exit_survival
from .stats import Estimate, fit_slope, mean_estimate
from .tvs import FrontierHit, TvsApprox, radius_law_sample

WINDOW_RADIUS = 0.5
MIN_BOXES = 20


class EstimatorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# box counting

@dataclass(frozen=True)
class BoxCountResult:
    scales: np.ndarray
    counts: np.ndarray
    slope: float
    window: tuple[int, int]  # inclusive index range of fitted scales


def dyadic_scales(h: float, largest: float = 1 / 8) -> np.ndarray:
    """``2^-k`` from ``largest`` down to the smallest value ``>= 4h``."""
    k0 = round(-math.log2(largest))
    out = []
    k = k0
    while 2.0**-k >= 4 * h * (1 - 1e-12):
        out.append(2.0**-k)
        k += 1
    return np.array(out)


def box_counts(points: np.ndarray, scales: Sequence[float]) -> np.ndarray:
    pts = np.asarray(points, dtype=complex)
    out = []
    for eps in scales:
        if pts.size == 0:
            out.append(0)
            continue
        key = np.stack([np.floor(pts.real / eps), np.floor(pts.imag / eps)], axis=1)
        out.append(len(np.unique(key, axis=0)))
    return np.array(out, dtype=np.int64)


def box_count(tvs_or_points, scales: Sequence[float] | None = None, window: float = WINDOW_RADIUS) -> BoxCountResult:
    """Occupied-box counts of the frontier inside ``|z| < window`` and the fitted slope.

    The two smallest scales and every scale with fewer than ``MIN_BOXES``
    boxes are left out of the fit.
    """
    if isinstance(tvs_or_points, TvsApprox):
        pts = tvs_or_points.frontier_pos
        if scales is None:
            scales = dyadic_scales(tvs_or_points.domain.h)
    else:
        pts = np.asarray(tvs_or_points, dtype=complex)
        if scales is None:
            raise EstimatorError("scales are required for a bare point set")
    scales = np.sort(np.asarray(scales, dtype=float))[::-1]
    if len(scales) < 4:
        raise EstimatorError(f"need at least 4 scales, got {len(scales)}")
    pts = pts[np.abs(pts) < window]
    counts = box_counts(pts, scales)
    fit = np.arange(len(scales) - 2)
    fit = fit[counts[fit] >= MIN_BOXES]
    if len(fit) < 2:
        return BoxCountResult(scales, counts, float("nan"), (0, -1))
    slope = fit_slope(np.log(1 / scales[fit]), np.log(counts[fit]))
    return BoxCountResult(scales, counts, slope, (int(fit[0]), int(fit[-1])))


# ---------------------------------------------------------------------------
# hitting probabilities

@dataclass(frozen=True)
class OnePointRow:
    eps: float
    p: float
    se: float
    series: float
    asymptotic: float


def radius_law_values(ensemble: Sequence[TvsApprox], z: complex = 0j) -> np.ndarray:
    """``log r_D(z) - log r_{D\\A}(z)`` per sample; ``inf`` where ``z`` is in the set."""
    out = []
    for tvs in ensemble:
        try:
            out.append(radius_law_sample(tvs, z))
        except FrontierHit:
            out.append(math.inf)
    return np.array(out)


def one_point_probability(ensemble, z: complex, eps_list: Sequence[float], params: TvsParams) -> list[OnePointRow]:
    """Empirical ``P(r_{D\\A}(z) <= eps)`` with the exact series and leading-order targets.

    ``ensemble`` is a sequence of :class:`TvsApprox` or an array of radius-law
    values ``t`` (``inf`` for samples where ``z`` is in the set).
    """
    eps_list = np.asarray(eps_list, dtype=float)
    if 1 - abs(z) < 2 * eps_list.max():
        raise EstimatorError("z must lie at distance >= 2 max(eps) from the boundary")
    t = np.asarray(ensemble, dtype=float) if not _is_tvs_seq(ensemble) else radius_law_values(ensemble, z)
    rz = float(disc_conformal_radius(z))
    law = params.exit_law()
    d = params.dimension
    rows = []
    for eps in eps_list:
        # r_{D\A} <= eps  <=>  t >= log(r_D / eps)
        hit = (t >= math.log(rz / eps)).astype(float)
        est = mean_estimate(hit)
        series = float(exit_survival(law, math.log(rz / eps)))
        asym = params.c_star * rz ** (d - 2) * eps ** (2 - d)
        rows.append(OnePointRow(float(eps), est.mean, est.se, series, asym))
    return rows


def _is_tvs_seq(obj) -> bool:
    return len(obj) > 0 and isinstance(obj[0], TvsApprox)


def one_point_slope(rows: Sequence[OnePointRow]) -> float:
    """Slope of ``log p`` against ``log eps``."""
    eps = np.array([r.eps for r in rows])
    p = np.array([r.p for r in rows])
    if np.any(p <= 0):
        return float("nan")
    return fit_slope(np.log(eps), np.log(p))


def distance_to_set(tvs: TvsApprox, z: complex) -> float:
    """Distance from ``z`` to the extracted set (0 if the nearest node is reachable)."""
    node = tvs.domain.nearest_node(z)
    if tvs.reachable[node]:
        return 0.0
    if tvs.frontier_pos.size == 0:
        return math.inf
    return float(np.min(np.abs(tvs.frontier_pos - z)))


@dataclass(frozen=True)
class TwoPointResult:
    delta: float
    p: float
    se: float
    scaling: float  # delta^{sigma^2} / |x-y|^{sigma^2/2}, constant K omitted


def two_point_probability(ensemble, x: complex, y: complex, delta: float, params: TvsParams, sigma: float | None = None):
    """Empirical ``P(d(x, A) <= delta, d(y, A) <= delta)``.

    ``ensemble`` is a sequence of :class:`TvsApprox` or an ``(m, 2)`` array of
    precomputed distances.  ``sigma`` defaults to ``sigma_c``.
    """
    sep = abs(x - y)
    if delta >= sep / 4:
        raise EstimatorError("delta must be smaller than |x - y| / 4")
    if max(abs(x), abs(y)) > WINDOW_RADIUS:
        raise EstimatorError("points must lie in the compact window")
    if _is_tvs_seq(ensemble):
        dist = np.array([[distance_to_set(t, x), distance_to_set(t, y)] for t in ensemble])
    else:
        dist = np.asarray(ensemble, dtype=float)
    sigma = params.sigma_c if sigma is None else sigma
    est = mean_estimate(((dist[:, 0] <= delta) & (dist[:, 1] <= delta)).astype(float))
    return TwoPointResult(delta, est.mean, est.se, delta ** (sigma**2) / sep ** (sigma**2 / 2))


def delta_slope(results: Sequence[TwoPointResult]) -> float:
    d = np.array([r.delta for r in results])
    p = np.array([r.p for r in results])
    if np.any(p <= 0):
        return float("nan")
    return fit_slope(np.log(d), np.log(p))


# ---------------------------------------------------------------------------
# Minkowski-content measure

@dataclass(frozen=True)
class MeasureApprox:
    delta: float
    density: np.ndarray  # per node, 0 on the extracted set
    total_mass: float
    radius_mode: str


def _check_delta(params: TvsParams, delta: float) -> None:
    if not 0 < delta < params.sigma_c:
        raise InvalidParameters(f"delta={delta} must lie in (0, sigma_c={params.sigma_c:.6g})")


def minkowski_measure(
    tvs: TvsApprox,
    delta: float,
    f: np.ndarray | None = None,
    log_radius: np.ndarray | None = None,
    max_exact: int | None = None,
    exponent: float | None = None,
) -> MeasureApprox:
    """``mu_delta(f) = delta * sum f r_{D\\A}^{-(sigma_c - delta)^2/2} h^2``.

    ``log_radius`` (per node, ``nan`` on the set) may be passed in; otherwise
    it is computed, exactly for components up to ``max_exact`` nodes and by
    the calibrated Koebe estimate above that.  ``exponent`` overrides
    ``(sigma_c - delta)^2 / 2``.
    """
    params = tvs.params
    _check_delta(params, delta)
    mode = "exact" if max_exact is None else f"koebe>{max_exact}"
    if log_radius is None:
        log_radius = tvs.log_radius_field(max_exact)
    s = (params.sigma_c - delta) ** 2 / 2 if exponent is None else exponent
    density = np.where(np.isnan(log_radius), 0.0, delta * np.exp(-s * np.nan_to_num(log_radius)))
    weight = density if f is None else density * np.asarray(f, float)
    total = math.fsum(weight * tvs.domain.h**2)
    return MeasureApprox(delta, density, total, mode)


# ---------------------------------------------------------------------------
# content functionals

def content_functional(radius, F: Callable, f=None, weights=None) -> float:
    """``sum f F(r) w`` over the cells off the set (``r`` finite and positive)."""
    r = np.asarray(radius, dtype=float)
    w = np.ones_like(r) if weights is None else np.broadcast_to(np.asarray(weights, float), r.shape)
    ok = np.isfinite(r) & (r > 0)
    vals = np.zeros_like(r)
    vals[ok] = F(r[ok])
    if f is not None:
        vals = vals * np.asarray(f, float)
    return math.fsum((vals * w)[ok])


def profile_f_delta(delta: float, sigma_c: float) -> Callable:
    """``F_delta(s) = delta s^{-sigma_c^2/2 + delta(sigma_c - delta/2)} 1_{s<1}``."""
    e = -(sigma_c**2) / 2 + delta * (sigma_c - delta / 2)

    def F(s):
        s = np.asarray(s, float)
        return np.where(s < 1, delta * s**e, 0.0)

    return F


def profile_j(u: float, sigma: float) -> Callable:
    """``J_u(x) = u^{-sigma^2/2} 1_{x<u}``."""

    def J(x):
        return np.where(np.asarray(x, float) < u, u ** (-(sigma**2) / 2), 0.0)

    return J


def f_delta_decomposition(radius, weights, delta: float, sigma_c: float) -> float:
    """Right side of ``F_delta(s) = delta - int_0^1 F'_delta(t) 1_{s<=t} dt`` summed
    against the cells, written through the ``J_t`` functionals:
    ``delta |{r<1}| + delta (s2 - e') int_0^1 t^{-s2-1+e'} (M(J_t^{sigma_c}), 1) t^{s2} dt``.

    The ``t`` integral of the step functions is done cell by cell in closed
    form.
    """
    r = np.asarray(radius, float)
    w = np.asarray(weights, float)
    s2 = sigma_c**2 / 2
    e = delta * (sigma_c - delta / 2)
    p = -s2 + e  # F_delta(s) = delta s^p
    sel = r < 1
    area = math.fsum(w[sel])
    # int_{r}^{1} t^{p-1} dt = (1 - r^p) / p
    tail = math.fsum(w[sel] * (1 - r[sel] ** p) / p)
    # -F'(t) = -delta p t^{p-1} = delta (s2 - e) t^{p-1}
    return delta * area + delta * (s2 - e) * tail


def richardson(values: Sequence[float], steps: Sequence[float]) -> float:
    """Polynomial extrapolation to step 0 assuming an expansion in powers of the step."""
    x = np.asarray(steps, float)
    y = np.asarray(values, float)
    coef = np.polyfit(x, y, len(x) - 1)
    return float(coef[-1])


def segment_radius_field(
    length: float = 1.0, reach: float = 1.0, order: int = 24, decades: int = 300, breaks: Sequence[float] = ()
):
    """Quadrature points around a segment ``[-L/2, L/2]`` with ``r = dist(z, segment)``.

    Covers the stadium ``{r < reach}``.  Distances are graded geometrically
    down to ``reach * 10^-decades`` so that profiles with an integrable
    ``r^{-1+e}`` singularity are resolved.  ``breaks`` adds panel edges (put
    the ``u`` of indicator profiles there).  Returns ``(points, r, weights)``.
    """
    g, gw = np.polynomial.legendre.leggauss(order)
    # radial rule on (0, reach): geometric panels in log10 distance
    edges = reach * 10.0 ** -np.arange(0, decades + 1)
    extra = [x for x in breaks if 0 < x < reach]
    edges = np.unique(np.r_[edges, extra])[::-1]
    a, b = edges[1:], edges[:-1]
    rr = (0.5 * (b - a)[:, None] * (g[None, :] + 1) + a[:, None]).ravel()
    rw = (0.5 * (b - a)[:, None] * gw[None, :]).ravel()
    # along the segment
    xs = 0.5 * length * g
    xw = 0.5 * length * gw
    pts, rad, wts = [], [], []
    for sign in (1, -1):
        pts.append((xs[:, None] + 1j * sign * rr[None, :]).ravel())
        rad.append(np.broadcast_to(rr[None, :], (order, len(rr))).ravel())
        wts.append((xw[:, None] * rw[None, :]).ravel())
    # half-disc caps at both ends
    th, thw = np.polynomial.legendre.leggauss(order)
    th = 0.5 * np.pi * (th + 1) - 0.5 * np.pi
    thw = 0.5 * np.pi * thw
    for end, rot in ((0.5 * length, 1.0), (-0.5 * length, -1.0)):
        pts.append((end + rot * rr[:, None] * np.exp(1j * th[None, :])).ravel())
        rad.append(np.broadcast_to(rr[:, None], (len(rr), order)).ravel())
        wts.append((rw[:, None] * rr[:, None] * thw[None, :]).ravel())
    return np.concatenate(pts), np.concatenate(rad), np.concatenate(wts)


@dataclass(frozen=True)
class ContentLemmaResult:
    steps: np.ndarray
    j_values: np.ndarray
    f_values: np.ndarray
    j_limit: float
    f_limit: float
    ratio: float  # lim M(J_u) / ((2/sigma_c) lim M(F_delta))


def content_lemma(radius, weights, sigma_c: float, steps=(0.1, 0.05, 0.025), f=None) -> ContentLemmaResult:
    """Both sides of the Abelian identity at matched ``u = delta`` steps, extrapolated."""
    steps = np.asarray(steps, float)
    if np.any(steps >= 1):
        raise EstimatorError("steps must be below 1")
    jv = np.array([content_functional(radius, profile_j(u, sigma_c), f, weights) for u in steps])
    fv = np.array([content_functional(radius, profile_f_delta(d, sigma_c), f, weights) for d in steps])
    jl, fl = richardson(jv, steps), richardson(fv, steps)
    return ContentLemmaResult(steps, jv, fv, jl, fl, jl / ((2 / sigma_c) * fl))


# ---------------------------------------------------------------------------
# energy

def energy_integral(points, masses, s: float, chunk: int = 2048) -> float:
    """``sum_{i != j} m_i m_j |x_i - x_j|^{-s}``."""
    if not 0 < s < 2:
        raise EstimatorError("s must lie in (0, 2)")
    z = np.asarray(points, dtype=complex).ravel()
    m = np.asarray(masses, dtype=float).ravel()
    if len(z) > 1:
        tree = cKDTree(np.c_[z.real, z.imag])
        if tree.query_pairs(0.0, output_type="ndarray").size:
            raise EstimatorError("distinct masses at coincident points")
    parts = []
    for start in range(0, len(z), chunk):
        sl = slice(start, start + chunk)
        d = np.abs(z[sl, None] - z[None, :])
        idx = np.arange(start, min(start + chunk, len(z)))
        d[np.arange(len(idx)), idx] = np.inf
        parts.append(np.sum(m[sl, None] * m[None, :] * d ** (-s)))
    return math.fsum(parts)


def measure_energy(measure: MeasureApprox, tvs: TvsApprox, s: float) -> float:
    """Energy of the node-discretized ``mu_delta`` (cells as point masses)."""
    keep = measure.density > 0
    return energy_integral(tvs.domain.coords[keep], measure.density[keep] * tvs.domain.h**2, s)


__all__ = [
    "BoxCountResult",
    "MeasureApprox",
    "box_count",
    "dyadic_scales",
    "one_point_probability",
    "one_point_slope",
    "two_point_probability",
    "delta_slope",
    "minkowski_measure",
    "content_functional",
    "content_lemma",
    "energy_integral",
    "Estimate",
]
