"""Closed-form quantities for two-valued sets and imaginary chaos on the unit disc.

Everything in this module is deterministic and cheap.  The Monte Carlo layers
(`lattice`, `tvs`, `chaos`, `estimators`) compare against the values computed
here.

Normalization: the Green's function of the unit disc is
``G(z, w) = log|1 - z conj(w)| - log|z - w|`` (no factor of 2*pi), in which the
height gap of the free field is ``LAMBDA = pi / 2``.  Level inputs ``a`` and
``b`` are in these field units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LAMBDA = math.pi / 2

#: Maximum number of series terms in the exit-time expansion.
MAX_TERMS = 10_000

Point = complex
GreenFn = Callable[[Point, Point], float]
RadiusFn = Callable[[Point], float]


class InvalidParameters(ValueError):
    pass


class QuadratureError(RuntimeError):
    """Raised when a quadrature does not reach the requested tolerance."""


@dataclass(frozen=True)
class TvsParams:
    """Levels ``-a`` and ``b`` of a two-valued set.

    The set exists iff ``a + b >= 2 * LAMBDA``.
    """

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise InvalidParameters(f"levels must be positive, got a={self.a}, b={self.b}")
        # relative slack so that a = b = LAMBDA survives float round-off
        if self.a + self.b < 2 * LAMBDA * (1 - 1e-12):
            raise InvalidParameters(
                f"a + b = {self.a + self.b:.6g} is below 2*lambda = {2 * LAMBDA:.6g}; "
                "no two-valued set exists"
            )

    @property
    def lam(self) -> float:
        return LAMBDA

    @property
    def width(self) -> float:
        return self.a + self.b

    @property
    def dimension(self) -> float:
        return dimension(self)

    @property
    def sigma_c(self) -> float:
        return sigma_critical(self)

    @property
    def c_star(self) -> float:
        return c_star(self)

    def exit_law(self, terms: int | None = None) -> "ExitLaw":
        return ExitLaw.from_params(self, terms)

    @classmethod
    def symmetric(cls, a: float) -> "TvsParams":
        return cls(a, a)


def dimension(params: TvsParams) -> float:
    """Almost sure Hausdorff dimension ``2 - 2 lambda^2 / (a+b)^2``."""
    return 2.0 - 2.0 * LAMBDA**2 / (params.a + params.b) ** 2


def sigma_critical(params: TvsParams) -> float:
    """Critical chaos parameter ``2 lambda / (a+b)``; ``d = 2 - sigma_c^2 / 2``."""
    return 2.0 * LAMBDA / (params.a + params.b)


def c_star(params: TvsParams) -> float:
    """Leading constant of the one-point estimate, ``(4/pi) sin(pi a / (a+b))``."""
    return 4.0 / math.pi * math.sin(math.pi * params.a / (params.a + params.b))


@dataclass(frozen=True)
class ExitLaw:
    """Brownian motion on ``(0, L)`` started from ``x0``.

    ``L = (a+b) pi / (2 lambda)`` and ``x0 = a pi / (2 lambda)``; with
    ``lambda = pi/2`` these are simply ``a + b`` and ``a``.
    """

    length: float
    x0: float
    terms: int | None = None

    @classmethod
    def from_params(cls, params: TvsParams, terms: int | None = None) -> "ExitLaw":
        scale = math.pi / (2 * LAMBDA)
        return cls((params.a + params.b) * scale, params.a * scale, terms)

    def eigenvalue(self, k):
        return np.asarray(k) * math.pi / self.length

    def coefficient(self, k):
        """``(2/L) int_0^L sin(lambda_k x) dx = 2 (1 - (-1)^k) / (k pi)``."""
        k = np.asarray(k)
        return 2.0 * (1.0 - (-1.0) ** k) / (k * math.pi)

    @property
    def rho(self) -> float:
        """Gap exponent ``(lambda_2^2 - lambda_1^2) / 2`` of the series remainder."""
        l1, l2 = self.eigenvalue(1), self.eigenvalue(2)
        return float((l2**2 - l1**2) / 2)

    @property
    def decay_rate(self) -> float:
        """``lambda_1^2 / 2``, equal to ``2 - d``."""
        return float(self.eigenvalue(1) ** 2 / 2)

    def truncation(self, t: float, tol: float = 1e-12) -> int:
        if self.terms is not None:
            return self.terms
        if t <= 0:
            return MAX_TERMS
        k = math.ceil(self.length * math.sqrt(2 * math.log(1 / tol)) / (math.pi * math.sqrt(t)))
        return int(min(MAX_TERMS, max(20, k)))


def exit_survival(law: ExitLaw, t, tol: float = 1e-12):
    """Survival probability ``P(tau > t)`` from the sine series.

    ``t`` may be a scalar or an array.  At ``t = 0`` the series is summed to
    ``MAX_TERMS`` terms and is only accurate to about ``1e-3`` (Gibbs).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise ValueError("t must be nonnegative")
    out = np.empty_like(t_arr)
    flat_t = t_arr.ravel()
    flat_out = out.ravel()
    if law.terms is not None:
        orders = np.full(flat_t.shape, law.terms)
    else:
        with np.errstate(divide="ignore"):
            k = np.ceil(law.length * math.sqrt(2 * math.log(1 / tol)) / (math.pi * np.sqrt(flat_t)))
        orders = np.where(flat_t > 0, np.clip(k, 20, MAX_TERMS), MAX_TERMS).astype(int)
    for order in np.unique(orders):
        sel = orders == order
        k = np.arange(1, order + 1, 2)  # even coefficients vanish
        lam = law.eigenvalue(k)
        amp = law.coefficient(k) * np.sin(lam * law.x0)
        flat_out[sel] = np.exp(-np.outer(flat_t[sel], lam**2 / 2)) @ amp
    np.clip(out, 0.0, 1.0, out=out)
    return out.reshape(np.shape(t)) if np.ndim(t) else float(out[0])


def exit_cdf(law: ExitLaw, t, tol: float = 1e-12):
    return 1.0 - exit_survival(law, t, tol)


def exit_tail(params: TvsParams, t):
    """Leading-order tail ``c_* exp(-(2-d) t)`` of the exit-time survival."""
    return c_star(params) * np.exp(-(2.0 - dimension(params)) * np.asarray(t, dtype=float))


def exit_laplace(params: TvsParams, sigma: float, x: float = 0.0) -> float:
    """``E^x[exp(sigma^2 tau / 2)]`` for the exit time of ``(-a, b)``.

    Translating the interval to ``[-w, w]`` with ``w = (a+b)/2`` gives
    ``cos(sigma (x - (b-a)/2)) / cos(sigma w)``.  Finite iff ``sigma < sigma_c``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma >= sigma_critical(params):
        raise InvalidParameters(
            f"sigma={sigma:.6g} >= sigma_c={sigma_critical(params):.6g}: the exponential moment is infinite"
        )
    if not (-params.a < x < params.b):
        raise ValueError(f"x={x} outside (-a, b)")
    center = (params.b - params.a) / 2
    half = (params.a + params.b) / 2
    return math.cos(sigma * (x - center)) / math.cos(sigma * half)


def disc_green(z: Point, w: Point):
    """Dirichlet Green's function of the unit disc, ``-log|w|`` at ``z = 0``.

    Accepts scalars or broadcastable complex arrays.
    """
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    gap = np.abs(z - w)
    if np.any(gap == 0):
        raise ValueError("Green's function is singular on the diagonal")
    g = np.log(np.abs(1 - z * np.conj(w))) - np.log(gap)
    return float(g) if g.ndim == 0 else g


def disc_conformal_radius(z: Point):
    z = np.asarray(z, dtype=complex)
    r = 1.0 - np.abs(z) ** 2
    return float(r) if r.ndim == 0 else r


def correlation(
    xs: Sequence[Point],
    ys: Sequence[Point],
    sigma: float,
    green: GreenFn = disc_green,
    radius: RadiusFn = disc_conformal_radius,
) -> float:
    """Correlation function of ``V^{i sigma}`` at ``xs`` and ``V^{-i sigma}`` at ``ys``.

    Like charges repel through ``exp(-sigma^2 G)``, opposite charges attract
    through ``exp(+sigma^2 G)``; each point carries ``r(z)^{-sigma^2/2}``.
    """
    xs, ys = list(xs), list(ys)
    s2 = sigma * sigma
    log_value = -0.5 * s2 * sum(math.log(radius(z)) for z in xs + ys)
    same = 0.0
    for pts in (xs, ys):
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                same += green(pts[i], pts[j])
    cross = sum(green(x, y) for x in xs for y in ys)
    return math.exp(log_value - s2 * same + s2 * cross)


def three_point_terms(x, y, z, sigma, green: GreenFn = disc_green, radius: RadiusFn = disc_conformal_radius):
    """The four three-point correlations entering ``H^sigma``, in the order
    ``<+++>, <++->_(x,y|z), <++->_(x,z|y), <++->_(y,z|x)``.

    Works on broadcastable arrays of points as long as ``green`` and
    ``radius`` do.
    """
    s2 = sigma * sigma
    gxy, gxz, gyz = green(x, y), green(x, z), green(y, z)
    pref = (radius(x) * radius(y) * radius(z)) ** (-s2 / 2)
    return (
        pref * np.exp(-s2 * (gxy + gxz + gyz)),
        pref * np.exp(s2 * (-gxy + gxz + gyz)),
        pref * np.exp(s2 * (-gxz + gxy + gyz)),
        pref * np.exp(s2 * (-gyz + gxy + gxz)),
    )


def h_sigma_kernel(x, y, z, sigma, green: GreenFn = disc_green, radius: RadiusFn = disc_conformal_radius):
    """``H^sigma(x, y, z)``: twice the sum of the four three-point correlations."""
    return 2 * sum(three_point_terms(x, y, z, sigma, green, radius))


# ---------------------------------------------------------------------------
# quadrature on the disc

def disc_nodes(center: complex = 0j, radius: float = 1.0, order: int = 24):
    """Tensor rule on a disc: Gauss-Legendre in the radius, trapezoid in angle.

    Returns ``(points, weights)`` with ``sum(weights) == pi * radius**2`` up to
    round-off.  Exact for polynomials of moderate degree.
    """
    xr, wr = np.polynomial.legendre.leggauss(order)
    rho = 0.5 * (xr + 1) * radius
    wrho = 0.5 * wr * radius * rho
    n_theta = 2 * order
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    pts = center + np.outer(rho, np.exp(1j * theta))
    wts = np.outer(wrho, np.full(n_theta, 2 * np.pi / n_theta))
    return pts.ravel(), wts.ravel()


def _polar_rule(order: int, boundary_exponent: float):
    # u = 1 - r^2 = v^p with p = 1/(1-s) cancels the u^{-s} singularity
    p = 1.0 / (1.0 - boundary_exponent)
    xv, wv = np.polynomial.legendre.leggauss(order)
    v = 0.5 * (xv + 1)
    u = v**p
    jac = 0.5 * wv * p * v ** (p - 1)
    r = np.sqrt(np.clip(1 - u, 0, None))
    n_theta = 2 * order
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    pts = np.outer(r, np.exp(1j * theta))
    # dz = r dr dtheta = du dtheta / 2
    wts = np.outer(0.5 * jac, np.full(n_theta, 2 * np.pi / n_theta))
    return pts, wts


def disc_quadrature(
    f: Callable[[np.ndarray], np.ndarray],
    tol: float = 1e-8,
    boundary_exponent: float = 0.0,
    max_order: int = 2048,
) -> float:
    """Integrate ``f`` over the unit disc.

    ``f`` is evaluated on complex arrays.  If ``f`` blows up like
    ``(1 - |z|^2)^{-s}`` at the circle, pass ``boundary_exponent=s``; the
    radial substitution then makes the integrand smooth.  ``s >= 1`` is not
    integrable and raises.

    The order is doubled until two successive estimates agree to ``tol``
    (absolute, relative to ``max(1, |I|)``).
    """
    s = boundary_exponent
    if s >= 1:
        raise QuadratureError(f"(1-|z|^2)^(-{s}) is not integrable on the disc")
    previous = None
    order = 16
    while order <= max_order:
        pts, wts = _polar_rule(order, s)
        val = float(np.sum(np.real(f(pts)) * wts))
        if previous is not None and abs(val - previous) <= tol * max(1.0, abs(val)):
            return val
        previous = val
        order *= 2
    raise QuadratureError(f"disc quadrature did not converge to {tol} (last={previous})")


def radial_power_integral(s: float) -> float:
    """Exact ``int_D (1-|z|^2)^{-s} dz = pi / (1 - s)`` for ``s < 1``."""
    if s >= 1:
        raise QuadratureError("non-integrable exponent")
    return math.pi / (1.0 - s)


def expected_measure_mass(params: TvsParams, delta: float, f: Callable | None = None, tol: float = 1e-8) -> float:
    """Expected mass ``E[mu_delta(f)]`` of the Minkowski-content approximation.

    For ``delta > 0`` the value is exact at finite ``delta``:
    ``delta * E[exp(s' tau)] * int f r^{-s'}`` with ``s' = (sigma_c - delta)^2 / 2``,
    the exponential moment coming from ``exit_laplace``.  ``delta = 0`` gives
    the limiting constant ``2/(a+b) sin(pi a/(a+b)) int f r^{-sigma_c^2/2}``.

    ``f=None`` means the indicator of the whole disc.
    """
    sc = sigma_critical(params)
    if not (0 <= delta < sc):
        raise InvalidParameters(f"delta={delta} must lie in [0, sigma_c={sc:.6g})")
    sig = sc - delta
    s = sig * sig / 2
    if f is None:
        integral = radial_power_integral(s)
    else:
        integral = disc_quadrature(lambda z: f(z) * (1 - np.abs(z) ** 2) ** (-s), tol=tol, boundary_exponent=s)
    if delta == 0:
        factor = 2.0 / (params.a + params.b) * math.sin(math.pi * params.a / (params.a + params.b))
    else:
        factor = delta * exit_laplace(params, sig, 0.0)
    return factor * integral
