"""Regularized imaginary chaos ``V_eps^{i sigma}`` on lattice fields.

``V_eps(z) = exp(i sigma Gamma_eps(z) - (sigma^2/2) ln eps)`` with ``Gamma_eps``
the circle average of radius ``eps``.  On the lattice the circle average has
variance ``log(1/eps) + log r(z) + offset`` where the offset is O(h/eps) and is
computed exactly from the discrete Green's function; the chaos is multiplied by
``exp(sigma^2 offset / 2)`` so that ``E[V_eps(z)] = r(z)^{-sigma^2/2}`` holds on
the lattice as in the continuum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from . import analytic
from .analytic import InvalidParameters, TvsParams
from .lattice import (
    DomainError,
    GffSample,
    LatticeDomain,
    check_eps,
    circle_average_grid,
    circle_average_offset,
    circle_points,
)
from .stats import Estimate, complex_estimate, mean_estimate
from .tvs import TvsApprox, markov_resample

SIGMA_MAX = math.sqrt(2)


def default_eps(h: float) -> float:
    return max(8 * h, 0.04)


_OFFSETS: dict = {}


def lattice_offset(domain: LatticeDomain, eps: float) -> float:
    key = (domain.n, round(eps, 12))
    if key not in _OFFSETS:
        _OFFSETS[key] = circle_average_offset(domain, eps)
    return _OFFSETS[key]


def _check_sigma(sigma: float) -> None:
    if not (0 <= sigma < SIGMA_MAX):
        raise InvalidParameters(f"sigma={sigma} outside [0, sqrt 2)")


def admissible_nodes(domain: LatticeDomain, eps: float) -> np.ndarray:
    """Nodes whose circle of radius ``eps`` (plus interpolation stencil) stays inside."""
    return domain.distance_to_boundary() > eps + domain.h


@dataclass
class ChaosField:
    sigma: float
    eps: float
    values: np.ndarray  # complex, per admissible node (nan-free)
    nodes: np.ndarray  # admissible node ids
    correction: float
    domain: LatticeDomain = field(repr=False)

    @property
    def modulus(self) -> float:
        """Deterministic ``|V_eps|``: ``eps^{-sigma^2/2}`` times the lattice correction."""
        return self.eps ** (-self.sigma**2 / 2) * self.correction


def build_chaos(sample: GffSample, sigma: float, eps: float | None = None, lattice_correction: bool = True) -> ChaosField:
    domain = sample.domain
    _check_sigma(sigma)
    eps = default_eps(domain.h) if eps is None else eps
    check_eps(domain, eps)
    avg = circle_average_grid(domain, sample.grid(), eps)
    nodes = np.flatnonzero(admissible_nodes(domain, eps))
    gamma = avg[domain.ij[nodes, 0], domain.ij[nodes, 1]]
    corr = math.exp(sigma**2 * lattice_offset(domain, eps) / 2) if lattice_correction else 1.0
    vals = np.exp(1j * sigma * gamma) * (eps ** (-sigma**2 / 2) * corr)
    return ChaosField(sigma, eps, vals, nodes, corr, domain)


def pair_indicator(chaos: ChaosField, region: np.ndarray) -> complex:
    """Riemann sum of ``V_eps`` over the nodes in ``region`` (bool mask or ids)."""
    domain = chaos.domain
    ids = _as_ids(domain, region)
    if ids.size == 0:
        return 0j
    pos = np.searchsorted(chaos.nodes, ids)
    if np.any(pos >= len(chaos.nodes)) or np.any(chaos.nodes[np.minimum(pos, len(chaos.nodes) - 1)] != ids):
        raise DomainError("region touches the eps-collar of the boundary")
    return complex(np.sum(chaos.values[pos]) * domain.h**2)


def cosine_observable(chaos: ChaosField, region) -> float:
    return 2.0 * pair_indicator(chaos, region).real


def _as_ids(domain: LatticeDomain, region) -> np.ndarray:
    region = np.asarray(region)
    if region.dtype == bool:
        return np.flatnonzero(region)
    return np.unique(region.astype(np.int64))


def disc_region(domain: LatticeDomain, center: complex, radius: float) -> np.ndarray:
    """Node ids within ``radius`` of ``center``."""
    return np.flatnonzero(np.abs(domain.coords - center) < radius)


# ---------------------------------------------------------------------------
# ensemble machinery: circle averages restricted to a set of nodes

class RegionChaos:
    """Evaluates ``V_eps`` on a fixed node set for many fields at once."""

    def __init__(self, domain: LatticeDomain, nodes, sigma: float, eps: float, lattice_correction: bool = True):
        _check_sigma(sigma)
        check_eps(domain, eps)
        self.domain = domain
        self.nodes = np.asarray(nodes, dtype=np.int64)
        ok = admissible_nodes(domain, eps)[self.nodes]
        if not np.all(ok):
            raise DomainError("region touches the eps-collar of the boundary")
        self.sigma, self.eps = sigma, eps
        self.operator, self.outside = circle_operator(domain, self.nodes, eps)
        corr = math.exp(sigma**2 * lattice_offset(domain, eps) / 2) if lattice_correction else 1.0
        self.scale = eps ** (-sigma**2 / 2) * corr

    def circle_averages(self, values: np.ndarray, boundary_shift: float = 0.0) -> np.ndarray:
        """``values``: ``(k, N)`` field values without the shift."""
        values = np.atleast_2d(values)
        return (self.operator @ values.T).T + boundary_shift

    def chaos(self, values, boundary_shift: float = 0.0) -> np.ndarray:
        return np.exp(1j * self.sigma * self.circle_averages(values, boundary_shift)) * self.scale


def circle_operator(domain: LatticeDomain, nodes: np.ndarray, eps: float):
    """Sparse ``(len(nodes), N)`` matrix of circle-average weights at ``nodes``.

    The second return value is the weight falling on exterior grid points
    (which carry the boundary value); it is zero for admissible nodes.
    """
    m = circle_points(eps, domain.h)
    theta = 2 * np.pi * np.arange(m) / m
    z = domain.coords[nodes]
    p = (z[:, None] + eps * np.exp(1j * theta)[None, :]) / domain.h + (domain.n / 2) * (1 + 1j)
    fx, fy = np.floor(p.real).astype(np.int64), np.floor(p.imag).astype(np.int64)
    tx, ty = p.real - fx, p.imag - fy
    rows_all, cols_all, w_all = [], [], []
    outside = np.zeros(len(nodes))
    row = np.broadcast_to(np.arange(len(nodes))[:, None], fx.shape)
    for dx, dy, wt in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        node = domain.index[fx + dx, fy + dy]
        ok = node >= 0
        rows_all.append(row[ok])
        cols_all.append(node[ok])
        w_all.append(wt[ok] / m)
        np.add.at(outside, row[~ok], wt[~ok] / m)
    op = sp.csr_matrix(
        (np.concatenate(w_all), (np.concatenate(rows_all), np.concatenate(cols_all))), shape=(len(nodes), domain.size)
    )
    return op, outside


# ---------------------------------------------------------------------------
# analytic targets over lattice regions

def region_weights(domain: LatticeDomain, region) -> tuple[np.ndarray, np.ndarray]:
    ids = _as_ids(domain, region)
    return domain.coords[ids], np.full(len(ids), domain.h**2)


def one_point_target(points, weights, sigma: float, radius=analytic.disc_conformal_radius) -> float:
    """``int f r^{-sigma^2/2}`` as a weighted sum."""
    return float(np.sum(weights * radius(points) ** (-sigma**2 / 2)))


def two_point_target(center: complex, radius: float, sigma: float, order: int = 16) -> float:
    """``iint_{U x U} r(x)^{-s^2/2} r(y)^{-s^2/2} exp(s^2 G(x, y)) dx dy`` for ``U`` a disc.

    The inner integral is taken in polar coordinates around ``x`` with a
    Gauss-Jacobi rule absorbing ``|x - y|^{-sigma^2}``.
    """
    s2 = sigma * sigma
    xo, wo = analytic.disc_nodes(center, radius, order)
    t, wt = roots_jacobi(order, 0.0, 1.0 - s2)
    t = 0.5 * (t + 1)
    wt = wt * 0.5 ** (2.0 - s2)
    n_theta = 4 * order
    theta = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    e = np.exp(1j * theta)
    total = 0.0
    for x, w in zip(xo, wo):
        q = (x - center) * np.conj(e)
        length = -q.real + np.sqrt(radius**2 - q.imag**2)
        rho = length[:, None] * t[None, :]
        y = x + rho * e[:, None]
        g = analytic.disc_conformal_radius(y) ** (-s2 / 2) * np.abs(1 - x * np.conj(y)) ** s2
        inner = np.sum(g * wt[None, :] * (length ** (2 - s2))[:, None]) * (2 * np.pi / n_theta)
        total += w * analytic.disc_conformal_radius(x) ** (-s2 / 2) * inner
    return float(total)


def triple_target(pu, wu, pv, wv, pw, ww, sigma: float, green=analytic.disc_green, radius=analytic.disc_conformal_radius):
    """``iiint H^sigma`` over three weighted point sets."""
    x = np.asarray(pu)[:, None, None]
    y = np.asarray(pv)[None, :, None]
    z = np.asarray(pw)[None, None, :]
    h = analytic.h_sigma_kernel(x, y, z, sigma, green, radius)
    wt = np.asarray(wu)[:, None, None] * np.asarray(wv)[None, :, None] * np.asarray(ww)[None, None, :]
    return float(np.sum(h * wt))


# ---------------------------------------------------------------------------
# conditional experiments

def check_conditional_sigma(params: TvsParams, sigma: float) -> None:
    if sigma >= params.sigma_c:
        raise InvalidParameters(
            f"sigma={sigma} >= sigma_c={params.sigma_c:.4g}: the conditional formulas do not hold there"
        )


def conditional_one_point(
    sample: GffSample,
    tvs: TvsApprox,
    resample_count: int,
    f: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    eps: float | None = None,
    batch: int = 50,
):
    """Nested estimate of ``E[(V, f) | F_A]`` and its analytic value.

    ``f`` is a vector of node weights (test function values).  Returns
    ``(estimate, rhs)`` where ``estimate`` is a complex :class:`Estimate`
    pair ``(real, imag)`` and ``rhs`` is
    ``sum f r_{D\\A}^{-sigma^2/2} exp(i sigma h_A) h^2`` over component nodes.
    """
    check_conditional_sigma(tvs.params, sigma)
    domain = sample.domain
    eps = default_eps(domain.h) if eps is None else eps
    f = np.asarray(f, dtype=float)
    support = np.flatnonzero(f != 0)
    rc = RegionChaos(domain, support, sigma, eps)
    weights = f[support] * domain.h**2
    pairings = []
    done = 0
    while done < resample_count:
        k = min(batch, resample_count - done)
        vals = markov_resample(sample, tvs, rng, k)
        pairings.append(rc.chaos(vals, sample.boundary_shift) @ weights)
        done += k
    est = complex_estimate(np.concatenate(pairings))
    return est, conditional_one_point_rhs(tvs, f, sigma)


def conditional_one_point_rhs(tvs: TvsApprox, f: np.ndarray, sigma: float) -> complex:
    domain = tvs.domain
    total = 0j
    support = np.flatnonzero(np.asarray(f) != 0)
    comps = np.unique(tvs.component_of[support])
    for k in comps[comps >= 0]:
        comp = tvs.component(int(k))
        logr = comp.log_radius_all
        fk = f[comp.nodes]
        sel = fk != 0
        total += np.sum(fk[sel] * np.exp(-sigma**2 / 2 * logr[sel])) * np.exp(1j * sigma * comp.label)
    return complex(total * domain.h**2)


@dataclass
class ThreePointRhs:
    value: float
    lower_bound: float
    h_integral: float


def conditional_three_point_rhs(tvs: TvsApprox, regions, sigma: float) -> ThreePointRhs:
    """Conditional expectation of ``C_U C_V C_W`` given the extracted set.

    ``regions`` are three node-id arrays.  Component Green's functions and
    conformal radii come from the component networks; reachable nodes are
    dropped (they form the set itself).  Only symmetric levels are supported.
    """
    params = tvs.params
    if not math.isclose(params.a, params.b):
        raise InvalidParameters("the three-point conditional formula needs a == b")
    check_conditional_sigma(params, sigma)
    a = params.a
    domain = tvs.domain
    ids = [np.asarray(r, dtype=np.int64) for r in regions]
    ids = [r[tvs.component_of[r] >= 0] for r in ids]
    if any(len(r) == 0 for r in ids):
        return ThreePointRhs(0.0, 0.0, 0.0)
    all_ids = np.unique(np.concatenate(ids))
    logr = np.empty(domain.size)
    green_cols = {}
    for k in np.unique(tvs.component_of[all_ids]):
        comp = tvs.component(int(k))
        members = all_ids[tvs.component_of[all_ids] == k]
        loc = np.array([comp.local(int(m)) for m in members])
        logr[members] = comp.log_radius_all[loc]
        rhs = np.zeros((comp.size, len(loc)))
        rhs[loc, np.arange(len(loc))] = 1.0
        sol = np.asarray(comp.subgraph.solve(rhs)).reshape(comp.size, len(loc)) * (2 * math.pi)
        for j, m in enumerate(members):
            green_cols[int(m)] = (k, comp, sol[:, j])

    def gmat(p, q):
        out = np.zeros((len(p), len(q)))
        for i, m in enumerate(p):
            k, comp, col = green_cols[int(m)]
            same = tvs.component_of[q] == k
            if np.any(same):
                out[i, same] = col[[comp.local(int(x)) for x in q[same]]]
        return out

    u, v, w = ids
    guv, guw, gvw = gmat(u, v), gmat(u, w), gmat(v, w)
    s2 = sigma * sigma
    pref = (
        np.exp(-s2 / 2 * logr[u])[:, None, None]
        * np.exp(-s2 / 2 * logr[v])[None, :, None]
        * np.exp(-s2 / 2 * logr[w])[None, None, :]
    )
    gxy, gxz, gyz = guv[:, :, None], guw[:, None, :], gvw[None, :, :]
    t1 = pref * np.exp(-s2 * (gxy + gxz + gyz))
    t2 = pref * np.exp(s2 * (-gxy + gxz + gyz))
    t3 = pref * np.exp(s2 * (-gxz + gxy + gyz))
    t4 = pref * np.exp(s2 * (-gyz + gxy + gxz))
    hk = 2 * (t1 + t2 + t3 + t4)
    lab = tvs.labels[tvs.component_of]
    hx, hy, hz = lab[u][:, None, None], lab[v][None, :, None], lab[w][None, None, :]
    a1 = (hx == hy) & (hy == hz)
    a2 = (hx == hy) & (hy != hz)
    a3 = (hx == hz) & (hx != hy)
    a4 = (hy == hz) & (hx != hy)
    cell = domain.h**6
    hint = float(np.sum(hk) * cell)
    sel = float(np.sum(a1 * t1 + a2 * t2 + a3 * t3 + a4 * t4) * cell)
    ca, sa = math.cos(a * sigma), math.sin(a * sigma)
    value = 2 * ca * hint - 8 * ca * sa * sa * sel
    return ThreePointRhs(value, 2 * ca**3 * hint, hint)


def cosine_triple_samples(values, regions_chaos, boundary_shift: float = 0.0) -> np.ndarray:
    """Per-sample ``C_U C_V C_W`` for three :class:`RegionChaos` evaluators."""
    prod = None
    for rc in regions_chaos:
        c = 2 * np.real(rc.chaos(values, boundary_shift).sum(axis=1)) * rc.domain.h**2
        prod = c if prod is None else prod * c
    return prod


__all__ = [
    "ChaosField",
    "RegionChaos",
    "build_chaos",
    "pair_indicator",
    "cosine_observable",
    "disc_region",
    "conditional_one_point",
    "conditional_one_point_rhs",
    "conditional_three_point_rhs",
    "triple_target",
    "one_point_target",
    "two_point_target",
    "Estimate",
    "mean_estimate",
]
