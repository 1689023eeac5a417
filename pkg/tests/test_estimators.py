import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvslab.analytic import LAMBDA, InvalidParameters, TvsParams, exit_survival
from tvslab.estimators import (
    EstimatorError,
    box_count,
    box_counts,
    content_functional,
    content_lemma,
    delta_slope,
    distance_to_set,
    dyadic_scales,
    energy_integral,
    f_delta_decomposition,
    minkowski_measure,
    one_point_probability,
    one_point_slope,
    profile_f_delta,
    profile_j,
    richardson,
    segment_radius_field,
    two_point_probability,
)
from tvslab.lattice import build_domain, sample_gff
from tvslab.tvs import TvsApprox, extract_tvs

WIDE = TvsParams(2 * LAMBDA, 2 * LAMBDA)
SCALES = 2.0 ** -np.arange(3, 9)


def test_dyadic_scales():
    s = dyadic_scales(2 / 512)
    assert s[0] == 1 / 8 and s[-1] >= 4 * 2 / 512 and s[-1] / 2 < 4 * 2 / 512
    assert len(s) == 4
    with pytest.raises(EstimatorError):
        box_count(extract_tvs(sample_gff(build_domain(64), 0), WIDE))


def test_box_count_square_and_segment():
    g = np.linspace(-0.35, 0.35, 701)
    square = (g[:, None] + 1j * g[None, :]).ravel()
    assert box_count(square, SCALES).slope == pytest.approx(2.0, abs=0.1)
    seg = np.linspace(-0.45, 0.45, 20001) * np.exp(0.3j)
    assert box_count(seg, SCALES).slope == pytest.approx(1.0, abs=0.1)
    with pytest.raises(EstimatorError):
        box_count(seg)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_box_count_monotone(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, 300) + 1j * rng.uniform(-0.5, 0.5, 300)
    c = box_counts(pts, SCALES)
    assert np.all(c[1:] <= 4 * c[:-1])
    assert np.all(c[1:] >= c[:-1])


def test_one_point_huge_band_and_slope():
    t = np.zeros(50)
    huge = TvsParams(1e3, 1e3)
    rows = one_point_probability(t, 0j, [0.1, 0.05], huge)
    assert all(r.p == 0 for r in rows)
    assert math.isnan(one_point_slope(rows))
    with pytest.raises(EstimatorError):
        one_point_probability(t, 0.9, [0.1], huge)
    # a fake ensemble whose t follows the exit law exactly gives the series
    eps = np.exp(-np.array([1.5, 2.0, 2.5]))
    law = WIDE.exit_law()
    tt = np.linspace(0, 60, 200001)
    surv = exit_survival(law, tt)
    u = (np.arange(20000) + 0.5) / 20000
    t = np.interp(-u, -surv, tt)
    rows = one_point_probability(t, 0j, eps, WIDE)
    for r in rows:
        assert r.p == pytest.approx(r.series, abs=2e-3)
    # the leading mode takes over as eps shrinks
    gaps = [abs(r.asymptotic / r.series - 1) for r in rows]
    assert gaps[0] > gaps[1] > gaps[2]


def test_two_point_errors_and_values():
    x, y = -0.125, 0.125
    with pytest.raises(EstimatorError):
        two_point_probability(np.zeros((3, 2)), x, y, 0.07, WIDE)
    with pytest.raises(EstimatorError):
        two_point_probability(np.zeros((3, 2)), 0.6, 0.9, 0.01, WIDE)
    dist = np.array([[0.0, 0.0], [0.02, 0.0], [0.0, 0.5], [1.0, 1.0]])
    r = two_point_probability(dist, x, y, 0.03, WIDE)
    assert r.p == 0.5
    res = [two_point_probability(np.array([[d, d]] * 4 + [[1, 1]] * 4), x, y, d + 1e-3, WIDE) for d in (0.01, 0.02)]
    assert delta_slope(res) == pytest.approx(0.0, abs=1e-12)


def test_distance_to_set():
    d = build_domain(64)
    t = TvsApprox.trivial(d, WIDE)
    assert distance_to_set(t, 0j) == math.inf
    s = sample_gff(d, 0)
    t = extract_tvs(s, WIDE)
    node = int(np.flatnonzero(t.reachable)[0])
    assert distance_to_set(t, d.coords[node]) == 0.0


def test_minkowski_linear_and_homogeneous():
    d = build_domain(64)
    t = extract_tvs(sample_gff(d, 3), TvsParams(LAMBDA, LAMBDA))
    rng = np.random.default_rng(0)
    f, g = rng.random(d.size), rng.random(d.size)
    m = lambda w: minkowski_measure(t, 0.1, w).total_mass
    assert m(f + g) == pytest.approx(m(f) + m(g), rel=1e-12)
    assert m(2.5 * f) == pytest.approx(2.5 * m(f), rel=1e-12)
    full = minkowski_measure(t, 0.1)
    assert np.all(full.density[t.reachable] == 0)
    assert full.total_mass >= 0
    with pytest.raises(InvalidParameters):
        minkowski_measure(t, 1.5)


def test_profiles():
    J = profile_j(0.2, 1.0)
    np.testing.assert_allclose(J([0.1, 0.3]), [0.2**-0.5, 0.0])
    F = profile_f_delta(0.1, 1.0)
    assert F(2.0) == 0.0 and F(0.5) == pytest.approx(0.1 * 0.5 ** (-0.5 + 0.1 * 0.95))
    assert content_functional(np.array([0.1, np.inf, 0.0]), lambda r: r * 0 + 1.0) == 1.0


def test_f_delta_decomposition():
    rng = np.random.default_rng(1)
    r = rng.uniform(1e-4, 1.5, 5000)
    w = rng.random(5000)
    for delta in (0.3, 0.1, 0.02):
        direct = content_functional(r, profile_f_delta(delta, 1.0), weights=w)
        assert f_delta_decomposition(r, w, delta, 1.0) == pytest.approx(direct, rel=1e-6)


def test_richardson_exact_polynomial():
    steps = np.array([0.1, 0.05, 0.025])
    assert richardson(2 + 3 * steps - steps**2, steps) == pytest.approx(2.0)


def test_content_lemma_on_segment():
    # a segment has dimension 1, the profile exponent corresponds to sigma_c = sqrt 2
    steps = (0.1, 0.05, 0.025)
    pts, r, w = segment_radius_field(breaks=steps)
    assert math.fsum(w) == pytest.approx(2 + math.pi, rel=1e-10)
    res = content_lemma(r, w, math.sqrt(2), steps)
    assert res.ratio == pytest.approx(1.0, abs=0.02)
    with pytest.raises(EstimatorError):
        content_lemma(r, w, math.sqrt(2), (1.0, 0.5, 0.25))


def test_energy_basics():
    assert energy_integral([0, 1], [1, 1], 0.5) == pytest.approx(2.0)
    with pytest.raises(EstimatorError):
        energy_integral([0, 1], [1, 1], 2.0)
    with pytest.raises(EstimatorError):
        energy_integral([0, 0], [1, 1], 0.5)


def test_energy_segment():
    n, s = 20000, 0.5
    x = (np.arange(n) + 0.5) / n
    exact = 2 / ((1 - s) * (2 - s))
    assert energy_integral(x + 0j, np.full(n, 1 / n), s) == pytest.approx(exact, rel=0.01)
