import math

import numpy as np
import pytest

from tvslab.analytic import disc_conformal_radius, disc_green
from tvslab.lattice import (
    FIELD_SCALE,
    DomainError,
    GffSample,
    Subgraph,
    build_domain,
    circle_average,
    circle_average_covariance,
    circle_average_offset,
    circle_weights,
    discrete_green,
    gff_values,
    green_column,
    harmonic_extension,
    read_snapshot,
    sample_gff,
    write_snapshot,
)
from tvslab.rng import task_rng


@pytest.fixture(scope="module")
def d64():
    return build_domain(64)


def test_small_domain_count():
    d = build_domain(16)
    assert 140 <= d.size <= 200
    assert np.all(np.abs(d.coords) <= 1 - d.h / 2 + 1e-12)


def test_bad_resolution():
    with pytest.raises(DomainError):
        build_domain(2)
    with pytest.raises(DomainError):
        build_domain(33)


def test_laplacian_rows(d64):
    lap = d64.laplacian.tocsr()
    sums = np.asarray(lap.sum(axis=1)).ravel()
    n_bnd = np.bincount(d64.edge_u[d64.boundary_edges], minlength=d64.size)
    np.testing.assert_allclose(sums[n_bnd == 0], 0.0, atol=1e-12)
    assert np.all(sums[n_bnd > 0] > 0)
    assert abs(lap - lap.T).max() == 0


def test_graph_connected(d64):
    from scipy.sparse.csgraph import connected_components

    assert connected_components(d64.neighbors(), directed=False)[0] == 1


def test_discrete_green_symmetric_positive(d64):
    rng = np.random.default_rng(0)
    for z, w in rng.integers(0, d64.size, size=(5, 2)):
        assert abs(discrete_green(d64, z, w) - discrete_green(d64, w, z)) < 1e-10
    assert green_column(d64, 17).min() >= -1e-12


def test_discrete_green_first_order():
    # the staircase boundary makes the O(h) constant oscillate with n
    hs, errs = [], []
    for n in (32, 64, 128, 256, 512):
        d = build_domain(n)
        z, w = d.nearest_node(0.25), d.nearest_node(0.5)
        hs.append(d.h)
        errs.append(abs(discrete_green(d, z, w) - disc_green(0.25, 0.5)))
    assert all(e <= 0.3 * h for e, h in zip(errs, hs))
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 0.7 < rate < 1.3


def test_kappa_value():
    # the point lattice constant approaches gamma + 3/2 log 2 as h -> 0
    d = build_domain(256)
    assert d.kappa == pytest.approx(np.euler_gamma + 1.5 * math.log(2), abs=0.02)


def test_gff_determinism(d64):
    a = sample_gff(d64, 5)
    b = sample_gff(d64, 5)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_gff(d64, 6).values)


def test_gff_moments(d64):
    vals = gff_values(d64, task_rng(1), 2000)
    z0 = d64.nearest_node(0j)
    x = vals[:, z0]
    assert abs(x.mean()) < 3 * x.std() / math.sqrt(len(x))
    target = math.log(1 / d64.h) + math.log(disc_conformal_radius(0)) + d64.kappa
    se = target * math.sqrt(2 / len(x))
    assert abs(np.mean(x**2) - target) < 3 * se


def test_covariance_oracle(d64):
    count = 5000
    vals = gff_values(d64, task_rng(2), count)
    emp = vals.T @ vals / count
    exact = FIELD_SCALE**2 * np.linalg.inv(d64.laplacian.toarray())
    var = np.diag(exact)
    se = np.sqrt((np.outer(var, var) + exact**2) / count)
    frac = np.mean(np.abs(emp - exact) <= 4 * se)
    assert frac >= 0.99


def test_gff_pair_covariance():
    d = build_domain(128)
    vals = gff_values(d, task_rng(3), 2000)
    z, w = d.nearest_node(-0.25), d.nearest_node(0.25 + 0.25j)
    prod = vals[:, z] * vals[:, w]
    se = prod.std() / math.sqrt(len(prod))
    exact = disc_green(d.coords[z], d.coords[w])
    assert abs(prod.mean() - exact) < 3 * se + 2 * d.h


def test_circle_average_basic(d64):
    s = GffSample(d64, np.zeros(d64.size), boundary_shift=1.7)
    assert circle_average(s, 0.1j, 0.2) == pytest.approx(1.7)
    f = sample_gff(d64, 1)
    g = sample_gff(d64, 2)
    fg = GffSample(d64, f.values + g.values)
    assert circle_average(fg, 0.1, 0.2) == pytest.approx(circle_average(f, 0.1, 0.2) + circle_average(g, 0.1, 0.2))
    with pytest.raises(DomainError):
        circle_average(f, 0j, 2 * d64.h)
    with pytest.raises(DomainError):
        circle_average(f, 0.9, 0.2)
    w = circle_weights(d64, 0.1, 0.2)
    assert w.sum() == pytest.approx(1.0)


def test_circle_average_variance():
    d = build_domain(128)
    eps = 0.1
    w = circle_weights(d, 0j, eps)
    vals = gff_values(d, task_rng(4), 2000)
    x = vals @ w
    exact = circle_average_covariance(d, 0j, 0j, eps)
    assert exact == pytest.approx(math.log(1 / eps) + circle_average_offset(d, eps))
    assert abs(circle_average_offset(d, eps)) < 0.1
    se = exact * math.sqrt(2 / len(x))
    assert abs(np.mean(x**2) - exact) < 3 * se


def test_circle_average_covariance_matches_green():
    d = build_domain(128)
    z, w = -0.3 + 0.1j, 0.35 - 0.2j
    assert circle_average_covariance(d, z, w, 0.1) == pytest.approx(disc_green(z, w), abs=0.02)


def test_harmonic_extension_properties(d64):
    nodes = np.flatnonzero(np.abs(d64.coords - 0.1) < 0.5)
    u = harmonic_extension(d64, nodes, 2.5)
    np.testing.assert_allclose(u, 2.5, atol=1e-12)
    data = lambda p: np.real(p) ** 2 - np.imag(p)
    v = harmonic_extension(d64, nodes, data)
    sub = Subgraph.from_nodes(d64, nodes)
    b = data(sub.frontier_pos)
    assert b.min() - 1e-12 <= v.min() and v.max() <= b.max() + 1e-12
    rhs = np.bincount(sub.frontier_node, weights=sub.frontier_cond * b, minlength=sub.size)
    assert np.max(np.abs(sub.matrix @ v - rhs)) < 1e-10


def test_harmonic_extension_conformal_radius():
    for n in (64, 128, 256):
        d = build_domain(n)
        z0 = 0.25 + 0.25j
        u = harmonic_extension(d, np.arange(d.size), lambda p: np.log(np.abs(p - z0)))
        assert abs(u[d.nearest_node(z0)] - math.log(disc_conformal_radius(z0))) <= 0.3 * d.h


def test_harmonic_extension_disconnected(d64):
    a = np.flatnonzero(np.abs(d64.coords - 0.5) < 0.1)
    b = np.flatnonzero(np.abs(d64.coords + 0.5) < 0.1)
    with pytest.raises(DomainError):
        harmonic_extension(d64, np.r_[a, b], 0.0)


def test_snapshot_roundtrip(tmp_path, d64):
    s = sample_gff(d64, 9, boundary_shift=0.25)
    path = tmp_path / "f.bin"
    write_snapshot(path, s)
    back = read_snapshot(path, d64)
    assert np.array_equal(back.values, s.values)
    assert back.boundary_shift == 0.25 and back.seed == 9
    raw = path.read_bytes()
    assert raw[:8] == b"TVSGFF01"
    assert np.array_equal(np.frombuffer(raw[-8 * d64.size :], "<f8"), s.values)
