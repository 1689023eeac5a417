"""Square-lattice discretization of the unit disc and the discrete free field.

Grid points ``z = h (i - n/2) + i h (j - n/2)`` with ``h = 2/n``; those with
``|z| <= 1 - h/2`` are interior nodes.  Every lattice edge with at least one
interior endpoint is a unit conductance; edges leaving the interior end at a
Dirichlet point (the exterior grid point).

The graph Laplacian ``A = B^T B`` (``B`` the edge incidence matrix) has inverse
``A^{-1} ~ (1/2pi) log(1/|z-w|)``; fields are multiplied by ``sqrt(2 pi)`` so
that their covariance approximates ``G(z, w) = -log|z - w| + ...`` as in
:mod:`tvslab.analytic`.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla
from scipy.sparse.csgraph import connected_components
from scipy.signal import fftconvolve

from .analytic import disc_conformal_radius

log = logging.getLogger(__name__)

FIELD_SCALE = math.sqrt(2 * math.pi)
MIN_RESOLUTION = 16
# subgraphs up to this size are inverted densely
DENSE_LIMIT = 600


class ResourceError(MemoryError):
    pass


class DomainError(ValueError):
    pass


def _factorize(matrix):
    return sla.splu(sp.csc_matrix(matrix), permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))


@dataclass(eq=False)
class LatticeDomain:
    n: int
    h: float
    index: np.ndarray  # (n+1, n+1) grid -> node id or -1
    ij: np.ndarray  # (N, 2) grid indices of nodes
    coords: np.ndarray  # (N,) complex positions
    edge_u: np.ndarray  # interior endpoint
    edge_v: np.ndarray  # interior endpoint or -1 (Dirichlet)
    edge_pos_v: np.ndarray  # position of the v endpoint
    incidence: sp.csr_matrix  # (E, N)
    laplacian: sp.csc_matrix

    @property
    def size(self) -> int:
        return len(self.coords)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    @property
    def edge_pos_u(self) -> np.ndarray:
        return self.coords[self.edge_u]

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_v < 0)

    @cached_property
    def factor(self):
        try:
            return _factorize(self.laplacian)
        except MemoryError as exc:  # pragma: no cover - depends on host
            raise ResourceError(f"factorization of {self.size} nodes ran out of memory") from exc

    @cached_property
    def kappa(self) -> float:
        """Lattice constant: ``Var(field at 0) - log(1/h) - log r(0)``."""
        z0 = self.nearest_node(0j)
        e = np.zeros(self.size)
        e[z0] = 1.0
        g = FIELD_SCALE**2 * self.factor.solve(e)[z0]
        return float(g - math.log(1 / self.h) - math.log(disc_conformal_radius(self.coords[z0])))

    def nearest_node(self, z: complex) -> int:
        i = int(round(z.real / self.h + self.n / 2))
        j = int(round(z.imag / self.h + self.n / 2))
        if not (0 <= i <= self.n and 0 <= j <= self.n) or self.index[i, j] < 0:
            raise DomainError(f"{z} is not near an interior node")
        return int(self.index[i, j])

    def to_grid(self, values: np.ndarray, outside: float = 0.0) -> np.ndarray:
        """Scatter node values (shape ``(..., N)``) onto the ``(n+1, n+1)`` grid."""
        values = np.asarray(values)
        grid = np.full(values.shape[:-1] + self.index.shape, outside, dtype=values.dtype)
        grid[..., self.ij[:, 0], self.ij[:, 1]] = values
        return grid

    def distance_to_boundary(self) -> np.ndarray:
        return 1.0 - np.abs(self.coords)

    def neighbors(self):
        """CSR adjacency among interior nodes."""
        inner = self.edge_v >= 0
        u, v = self.edge_u[inner], self.edge_v[inner]
        data = np.ones(2 * len(u))
        return sp.csr_matrix((data, (np.r_[u, v], np.r_[v, u])), shape=(self.size, self.size))


def build_domain(n: int) -> LatticeDomain:
    """Disc lattice at resolution ``n`` (grid spacing ``2/n``)."""
    if n < MIN_RESOLUTION:
        raise DomainError(f"resolution n={n} is below the minimum {MIN_RESOLUTION}")
    if n % 2:
        raise DomainError("resolution must be even so that 0 is a node")
    h = 2.0 / n
    k = (np.arange(n + 1) - n // 2) * h
    x, y = np.meshgrid(k, k, indexing="ij")
    inside = np.hypot(x, y) <= 1 - h / 2
    count = int(inside.sum())
    try:
        index = np.full(inside.shape, -1, dtype=np.int64)
        index[inside] = np.arange(count)
        ij = np.argwhere(inside)
        coords = x[inside] + 1j * y[inside]

        us, vs, pv = [], [], []
        for a, b, pb in (
            (index[:-1, :], index[1:, :], (x + 1j * y)[1:, :]),
            (index[:, :-1], index[:, 1:], (x + 1j * y)[:, 1:]),
        ):
            pa = (x + 1j * y)[: a.shape[0], : a.shape[1]]
            keep = (a >= 0) | (b >= 0)
            a, b, pa_, pb_ = a[keep], b[keep], pa[keep], pb[keep]
            flip = a < 0
            u = np.where(flip, b, a)
            v = np.where(flip, a, b)
            us.append(u)
            vs.append(v)
            pv.append(np.where(flip, pa_, pb_))
        edge_u, edge_v, edge_pos_v = np.concatenate(us), np.concatenate(vs), np.concatenate(pv)

        n_edges = len(edge_u)
        rows = np.arange(n_edges)
        inner = edge_v >= 0
        incidence = sp.csr_matrix(
            (
                np.r_[np.ones(n_edges), -np.ones(inner.sum())],
                (np.r_[rows, rows[inner]], np.r_[edge_u, edge_v[inner]]),
            ),
            shape=(n_edges, count),
        )
        laplacian = (incidence.T @ incidence).tocsc()
    except MemoryError as exc:  # pragma: no cover - depends on host
        raise ResourceError(f"building a lattice with {count} nodes ran out of memory") from exc
    log.debug("built disc lattice n=%d with %d nodes, %d edges", n, count, n_edges)
    return LatticeDomain(n, h, index, ij, coords, edge_u, edge_v, edge_pos_v, incidence, laplacian)


@dataclass
class GffSample:
    """One field realization on the interior nodes.

    ``values`` excludes ``boundary_shift``; the field is ``values + boundary_shift``
    everywhere, including the Dirichlet boundary.
    """

    domain: LatticeDomain = field(repr=False)
    values: np.ndarray
    boundary_shift: float = 0.0
    seed: int | None = None

    @property
    def total(self) -> np.ndarray:
        return self.values + self.boundary_shift

    def grid(self) -> np.ndarray:
        return self.domain.to_grid(self.total, outside=self.boundary_shift)


def gff_values(domain: LatticeDomain, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Zero-boundary field values, shape ``(N,)`` or ``(count, N)``.

    ``A^{-1} B^T xi`` with ``xi`` i.i.d. standard normal on edges has
    covariance ``A^{-1} B^T B A^{-1} = A^{-1}``; one backsolve per sample.
    """
    k = 1 if count is None else count
    xi = rng.standard_normal((domain.n_edges, k))
    x = domain.factor.solve(np.asarray(domain.incidence.T @ xi))
    x *= FIELD_SCALE
    return x[:, 0] if count is None else x.T


def sample_gff(domain: LatticeDomain, rng_seed, boundary_shift: float = 0.0) -> GffSample:
    """Sample a discrete GFF; ``rng_seed`` is an int or a ``numpy`` Generator."""
    if isinstance(rng_seed, np.random.Generator):
        rng, seed = rng_seed, None
    else:
        from .rng import task_rng

        rng, seed = task_rng(int(rng_seed)), int(rng_seed)
    return GffSample(domain, gff_values(domain, rng), boundary_shift, seed)


def green_column(domain: LatticeDomain, w: int) -> np.ndarray:
    e = np.zeros(domain.size)
    e[w] = 1.0
    return FIELD_SCALE**2 * domain.factor.solve(e)


def discrete_green(domain: LatticeDomain, z: int, w: int) -> float:
    """Discrete Green's function in field units (``2 pi A^{-1}``) at nodes ``z, w``."""
    return float(green_column(domain, w)[z])


# ---------------------------------------------------------------------------
# circle averages

def circle_points(eps: float, h: float) -> int:
    return max(32, math.ceil(2 * math.pi * eps / h))


def circle_kernel(eps: float, h: float) -> np.ndarray:
    """Stencil of the bilinearly interpolated uniform measure on a circle.

    Returned as a square array centered on the origin node; weights sum to 1.
    """
    m = circle_points(eps, h)
    theta = 2 * np.pi * np.arange(m) / m
    px, py = eps * np.cos(theta) / h, eps * np.sin(theta) / h
    half = int(math.ceil(eps / h)) + 1
    ker = np.zeros((2 * half + 1, 2 * half + 1))
    fx, fy = np.floor(px).astype(int), np.floor(py).astype(int)
    tx, ty = px - fx, py - fy
    for dx, dy, w in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        np.add.at(ker, (fx + dx + half, fy + dy + half), w / m)
    return ker


def check_eps(domain: LatticeDomain, eps: float) -> None:
    if eps < 3 * domain.h:
        raise DomainError(f"eps={eps} is below 3h={3 * domain.h:.4g}")


def circle_average_grid(domain: LatticeDomain, grid: np.ndarray, eps: float) -> np.ndarray:
    """Circle averages at every grid point (valid where the circle fits in the disc).

    ``grid`` may carry leading batch dimensions.
    """
    check_eps(domain, eps)
    ker = circle_kernel(eps, domain.h)
    # correlation with the kernel == convolution with the flipped kernel
    ker = ker[::-1, ::-1]
    ker = ker.reshape((1,) * (grid.ndim - 2) + ker.shape)
    return fftconvolve(grid, ker, mode="same", axes=(-2, -1))


def circle_average(sample: GffSample, z: complex, eps: float) -> float:
    """Mean of the interpolated field over ``M`` equally spaced circle points."""
    domain = sample.domain
    check_eps(domain, eps)
    if abs(z) + eps >= 1:
        raise DomainError(f"circle of radius {eps} about {z} leaves the disc")
    w = circle_weights(domain, z, eps)
    return float(w @ sample.values + sample.boundary_shift)


def circle_weights(domain: LatticeDomain, z: complex, eps: float) -> np.ndarray:
    """Node weights of the circle average about the point ``z``."""
    m = circle_points(eps, domain.h)
    theta = 2 * np.pi * np.arange(m) / m
    p = (z + eps * np.exp(1j * theta)) / domain.h + (domain.n / 2) * (1 + 1j)
    fx, fy = np.floor(p.real).astype(int), np.floor(p.imag).astype(int)
    tx, ty = p.real - fx, p.imag - fy
    w = np.zeros(domain.size)
    for dx, dy, wt in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        node = domain.index[fx + dx, fy + dy]
        ok = node >= 0
        np.add.at(w, node[ok], wt[ok] / m)
    return w


def circle_average_covariance(domain: LatticeDomain, z: complex, w: complex, eps: float) -> float:
    """Exact lattice covariance of the circle averages about ``z`` and ``w``."""
    wz, ww = circle_weights(domain, z, eps), circle_weights(domain, w, eps)
    return float(FIELD_SCALE**2 * wz @ domain.factor.solve(ww))


def circle_average_offset(domain: LatticeDomain, eps: float, z: complex = 0j) -> float:
    """``Var(Gamma_eps(z)) - log(1/eps) - log r(z)`` on this lattice."""
    var = circle_average_covariance(domain, z, z, eps)
    return var - math.log(1 / eps) - math.log(disc_conformal_radius(z))


# ---------------------------------------------------------------------------
# Dirichlet problems on node subsets

class Subgraph:
    """Node subset with Dirichlet frontier, as a resistor network.

    ``frontier_node`` (local indices), ``frontier_cond`` and ``frontier_pos``
    describe the edges leaving the subset: each is a conductance from a subset
    node to a Dirichlet point.  The matrix is the weighted graph Laplacian of
    the subset plus the frontier conductances on the diagonal.
    """

    def __init__(self, domain, nodes, frontier_node, frontier_cond, frontier_pos, internal_edges=None):
        self.domain = domain
        self.nodes = np.asarray(nodes, dtype=np.int64)
        self.frontier_node = np.asarray(frontier_node, dtype=np.int64)
        self.frontier_cond = np.asarray(frontier_cond, dtype=float)
        self.frontier_pos = np.asarray(frontier_pos, dtype=complex)
        if internal_edges is None:
            internal_edges = _internal_edges(domain, self.nodes)
        self.internal = internal_edges  # local (u, v) pairs
        self._factor = None
        self._inverse = None

    @classmethod
    def from_nodes(cls, domain: LatticeDomain, nodes) -> "Subgraph":
        """Subset with unit conductances to every outside neighbor."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(domain.size, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        lu, lv = local[domain.edge_u], np.where(domain.edge_v >= 0, local[np.maximum(domain.edge_v, 0)], -1)
        # edges with exactly one endpoint inside the subset
        out_from_u = (lu >= 0) & (lv < 0)
        out_from_v = (lu < 0) & (lv >= 0)
        f_node = np.r_[lu[out_from_u], lv[out_from_v]]
        f_pos = np.r_[domain.edge_pos_v[out_from_u], domain.coords[domain.edge_u[out_from_v]]]
        internal = np.stack([lu[(lu >= 0) & (lv >= 0)], lv[(lu >= 0) & (lv >= 0)]], axis=1)
        return cls(domain, nodes, f_node, np.ones(len(f_node)), f_pos, internal)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def coords(self) -> np.ndarray:
        return self.domain.coords[self.nodes]

    @cached_property
    def matrix(self) -> sp.csc_matrix:
        m = self.size
        u, v = self.internal[:, 0], self.internal[:, 1]
        deg = np.bincount(np.r_[u, v], minlength=m).astype(float)
        deg += np.bincount(self.frontier_node, weights=self.frontier_cond, minlength=m)
        rows = np.r_[u, v, np.arange(m)]
        cols = np.r_[v, u, np.arange(m)]
        data = np.r_[-np.ones(2 * len(u)), deg]
        return sp.csc_matrix((data, (rows, cols)), shape=(m, m))

    def is_connected(self) -> bool:
        if self.size == 0:
            return False
        adj = sp.csr_matrix(
            (np.ones(len(self.internal)), (self.internal[:, 0], self.internal[:, 1])), shape=(self.size, self.size)
        )
        return connected_components(adj, directed=False)[0] == 1

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.size <= DENSE_LIMIT:
            if self._inverse is None:
                self._inverse = np.linalg.inv(self.matrix.toarray())
            return self._inverse @ rhs
        if self._factor is None:
            self._factor = _factorize(self.matrix)
        return self._factor.solve(np.asarray(rhs, dtype=float))

    def harmonic(self, frontier_values) -> np.ndarray:
        """Discrete harmonic function with the given values at the frontier points."""
        rhs = np.bincount(
            self.frontier_node, weights=self.frontier_cond * np.asarray(frontier_values, float), minlength=self.size
        )
        return self.solve(rhs)

    def log_conformal_radius(self, local: int) -> float:
        """``u(z)`` for ``u`` harmonic with frontier data ``log|zeta - z|``."""
        z = self.coords[local]
        return float(self.harmonic(np.log(np.abs(self.frontier_pos - z)))[local])

    def log_conformal_radius_all(self, chunk: int = 256) -> np.ndarray:
        """``log r`` at every node of the subset (exact, no approximation).

        Uses whichever of per-node solves or harmonic-measure solves needs fewer
        right-hand sides.
        """
        m, nf = self.size, len(self.frontier_node)
        z = self.coords
        out = np.empty(m)
        if m <= DENSE_LIMIT:
            self.solve(np.zeros(m))  # builds the dense inverse
            harm = self._inverse[:, self.frontier_node] * self.frontier_cond
            return np.sum(harm * np.log(np.abs(self.frontier_pos[None, :] - z[:, None])), axis=1)
        if nf < m:
            out[:] = 0.0
            for start in range(0, nf, chunk):
                sl = slice(start, min(nf, start + chunk))
                k = sl.stop - sl.start
                rhs = np.zeros((m, k))
                rhs[self.frontier_node[sl], np.arange(k)] = self.frontier_cond[sl]
                harm = self.solve(rhs)
                out += np.sum(harm * np.log(np.abs(self.frontier_pos[None, sl] - z[:, None])), axis=1)
            return out
        for start in range(0, m, chunk):
            sl = np.arange(start, min(m, start + chunk))
            data = self.frontier_cond[:, None] * np.log(np.abs(self.frontier_pos[:, None] - z[None, sl]))
            rhs = np.zeros((m, len(sl)))
            np.add.at(rhs, self.frontier_node, data)
            sol = self.solve(rhs)
            out[sl] = sol[sl, np.arange(len(sl))]
        return out

    def green(self, z_local: int, w_local: int) -> float:
        e = np.zeros(self.size)
        e[w_local] = 1.0
        return float(FIELD_SCALE**2 * self.solve(e)[z_local])

    def sample(self, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
        """Zero-boundary discrete GFF on the subset (field units)."""
        k = 1 if count is None else count
        u, v = self.internal[:, 0], self.internal[:, 1]
        ne, nf = len(u), len(self.frontier_node)
        rows = np.arange(ne + nf)
        inc = sp.csr_matrix(
            (
                np.r_[np.ones(ne), -np.ones(ne), np.sqrt(self.frontier_cond)],
                (np.r_[rows[:ne], rows[:ne], rows[ne:]], np.r_[u, v, self.frontier_node]),
            ),
            shape=(ne + nf, self.size),
        )
        xi = rng.standard_normal((ne + nf, k))
        x = FIELD_SCALE * self.solve(np.asarray(inc.T @ xi))
        x = np.asarray(x).reshape(self.size, k)
        return x[:, 0] if count is None else x.T


def _internal_edges(domain: LatticeDomain, nodes: np.ndarray) -> np.ndarray:
    local = np.full(domain.size, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    inner = domain.edge_v >= 0
    lu, lv = local[domain.edge_u[inner]], local[domain.edge_v[inner]]
    keep = (lu >= 0) & (lv >= 0)
    return np.stack([lu[keep], lv[keep]], axis=1)


def harmonic_extension(domain: LatticeDomain, nodes, boundary_values) -> np.ndarray:
    """Harmonic extension into ``nodes`` of data on its lattice frontier.

    ``boundary_values`` is a callable of the (complex) frontier positions or a
    constant.
    """
    sub = Subgraph.from_nodes(domain, nodes)
    if not sub.is_connected():
        raise DomainError("node subset is not connected")
    if callable(boundary_values):
        data = boundary_values(sub.frontier_pos)
    else:
        data = np.full(len(sub.frontier_pos), float(boundary_values))
    return sub.harmonic(data)


# ---------------------------------------------------------------------------
# binary snapshot

_MAGIC = b"TVSGFF01"
_HEADER = struct.Struct("<8sqqdd q")


def write_snapshot(path, sample: GffSample) -> None:
    """Header (magic, n, seed, scale, boundary shift, count) then float64 LE values."""
    seed = -1 if sample.seed is None else sample.seed
    vals = np.asarray(sample.values, dtype="<f8")
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, sample.domain.n, seed, FIELD_SCALE, sample.boundary_shift, len(vals)))
        fh.write(vals.tobytes())


def read_snapshot(path, domain: LatticeDomain | None = None) -> GffSample:
    with open(Path(path), "rb") as fh:
        magic, n, seed, scale, shift, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != _MAGIC:
            raise ValueError(f"{path} is not a field snapshot")
        vals = np.frombuffer(fh.read(8 * count), dtype="<f8").copy()
    if domain is None:
        domain = build_domain(n)
    if domain.n != n or domain.size != count:
        raise ValueError(f"snapshot is for n={n}, got a domain with n={domain.n}")
    if not math.isclose(scale, FIELD_SCALE):
        vals *= FIELD_SCALE / scale
    return GffSample(domain, vals, shift, None if seed < 0 else seed)
