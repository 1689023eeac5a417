"""Two-valued set extraction by boundary reachability through the band ``[-a, b]``.

The lattice field is extended to the edges of the lattice (the metric graph).
A point is *reachable* if a path along edges connects it to the Dirichlet
boundary while the field stays inside the band; the reachable set plays the
role of the two-valued set and its complement splits into components, each
labelled by the level (``-a`` or ``b``) its frontier touches.

Two edge rules are available:

``"linear"`` (default)
    Plain linear interpolation; an edge leaves the band iff an endpoint does.
``"bridge"``
    The field on an edge is the endpoint interpolation plus an independent
    Brownian bridge (the metric-graph free field).  Each edge is resolved into
    ``substeps`` pieces; on each piece the exact two-sided bridge exit
    probability decides whether the band is left.  At the critical band
    ``a + b = 2 lambda`` almost nothing is reachable at lattice scale.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .analytic import TvsParams, disc_conformal_radius
from .lattice import FIELD_SCALE, GffSample, LatticeDomain, Subgraph

log = logging.getLogger(__name__)

EDGE_RULES = ("bridge", "linear")
# field-unit duration of the bridge on a unit-conductance edge
EDGE_DURATION = FIELD_SCALE**2
# smallest edge fraction kept between a component node and its frontier point
MIN_FRACTION = 1e-3


class ExtractionError(ValueError):
    pass


def bridge_stay_probability(x, y, width, duration, images: int = 3):
    """Probability that a Brownian bridge from ``x`` to ``y`` stays in ``(0, width)``.

    Method of images; ``duration`` is the bridge time (unit variance rate).
    Inputs outside ``(0, width)`` give 0.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    inside = (x > 0) & (x < width) & (y > 0) & (y < width)
    p = np.zeros(np.broadcast(x, y).shape)
    for k in range(-images, images + 1):
        kw = k * width
        p += np.exp(-2 * kw * (y - x + kw) / duration) - np.exp(-2 * (x + kw) * (y + kw) / duration)
    return np.where(inside, np.clip(p, 0.0, 1.0), 0.0)


@dataclass
class Component:
    """Connected component of the complement of the extracted set."""

    index: int
    nodes: np.ndarray
    label: float
    mixed: bool
    subgraph: Subgraph = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def local(self, node: int) -> int:
        hit = np.flatnonzero(self.nodes == node)
        if not hit.size:
            raise ExtractionError(f"node {node} is not in component {self.index}")
        return int(hit[0])

    def log_conformal_radius_at(self, node: int) -> float:
        return self.subgraph.log_conformal_radius(self.local(node))

    def conformal_radius_at(self, node: int) -> float:
        return math.exp(self.log_conformal_radius_at(node))

    @cached_property
    def log_radius_all(self) -> np.ndarray:
        return self.subgraph.log_conformal_radius_all()

    def green_at(self, z: int, w: int) -> float:
        return self.subgraph.green(self.local(z), self.local(w))

    def sample(self, rng, count=None):
        return self.subgraph.sample(rng, count)


@dataclass(eq=False)
class TvsApprox:
    domain: LatticeDomain = field(repr=False)
    params: TvsParams
    reachable: np.ndarray  # bool per node
    component_of: np.ndarray  # component id per node, -1 if reachable
    frontier_pos: np.ndarray  # complex positions of the first band exits
    frontier_level: np.ndarray
    # couplings from component nodes to frontier points
    coupling_node: np.ndarray
    coupling_frac: np.ndarray
    coupling_pos: np.ndarray
    coupling_level: np.ndarray
    rule: str = "linear"
    open_edges: np.ndarray | None = field(default=None, repr=False)
    fixed_labels: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def trivial(cls, domain: LatticeDomain, params: TvsParams) -> "TvsApprox":
        """Empty set: the whole lattice is one component with label 0."""
        bnd = domain.boundary_edges
        empty_c = np.zeros(0, dtype=complex)
        return cls(
            domain,
            params,
            np.zeros(domain.size, dtype=bool),
            np.zeros(domain.size, dtype=np.int64),
            empty_c,
            np.zeros(0),
            domain.edge_u[bnd],
            np.ones(len(bnd)),
            domain.edge_pos_v[bnd],
            np.zeros(len(bnd)),
            "trivial",
            np.zeros(domain.n_edges, dtype=bool),
            np.zeros(1),
        )

    @property
    def n_components(self) -> int:
        return int(self.component_of.max()) + 1 if self.component_of.size else 0

    @property
    def degenerate(self) -> bool:
        return self.n_components == 0

    @cached_property
    def _members(self):
        order = np.argsort(self.component_of, kind="stable")
        ids = self.component_of[order]
        start = np.searchsorted(ids, 0)
        bounds = np.searchsorted(ids[start:], np.arange(self.n_components + 1)) + start
        return order, bounds

    def component_nodes(self, k: int) -> np.ndarray:
        order, bounds = self._members
        return order[bounds[k] : bounds[k + 1]]

    @cached_property
    def labels(self) -> np.ndarray:
        """Label per component, majority of frontier crossings (ties by weight)."""
        if self.fixed_labels is not None:
            return np.asarray(self.fixed_labels, dtype=float)
        nc = self.n_components
        comp = self.component_of[self.coupling_node]
        is_b = self.coupling_level > 0
        cnt_b = np.bincount(comp, weights=is_b, minlength=nc)
        cnt_a = np.bincount(comp, weights=~is_b, minlength=nc)
        cond = 1.0 / self.coupling_frac
        w_b = np.bincount(comp, weights=cond * is_b, minlength=nc)
        w_a = np.bincount(comp, weights=cond * ~is_b, minlength=nc)
        pick_b = (cnt_b > cnt_a) | ((cnt_b == cnt_a) & (w_b >= w_a))
        return np.where(pick_b, self.params.b, -self.params.a)

    @cached_property
    def mixed(self) -> np.ndarray:
        if self.fixed_labels is not None:
            return np.zeros(self.n_components, dtype=bool)
        nc = self.n_components
        comp = self.component_of[self.coupling_node]
        is_b = self.coupling_level > 0
        cnt_b = np.bincount(comp, weights=is_b, minlength=nc)
        cnt_a = np.bincount(comp, weights=~is_b, minlength=nc)
        return (cnt_a > 0) & (cnt_b > 0)

    def label_field(self) -> np.ndarray:
        """``h_A`` per node: component label, ``nan`` on reachable nodes."""
        out = np.full(self.domain.size, np.nan)
        inside = self.component_of >= 0
        out[inside] = self.labels[self.component_of[inside]]
        return out

    @cached_property
    def _couplings_by_component(self):
        comp = self.component_of[self.coupling_node]
        order = np.argsort(comp, kind="stable")
        bounds = np.searchsorted(comp[order], np.arange(self.n_components + 1))
        return order, bounds

    @cached_property
    def _edges_by_component(self):
        d = self.domain
        inner = d.edge_v >= 0
        u, v = d.edge_u[inner], d.edge_v[inner]
        ku, kv = self.component_of[u], self.component_of[v]
        keep = (ku >= 0) & (ku == kv)
        u, v, k = u[keep], v[keep], ku[keep]
        order = np.argsort(k, kind="stable")
        bounds = np.searchsorted(k[order], np.arange(self.n_components + 1))
        return u[order], v[order], bounds

    @cached_property
    def complement(self) -> Subgraph:
        """All components as one block-diagonal network (nodes in id order)."""
        nodes = np.flatnonzero(self.component_of >= 0)
        local = np.full(self.domain.size, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        eu, ev, _ = self._edges_by_component
        return Subgraph(
            self.domain,
            nodes,
            local[self.coupling_node],
            1.0 / self.coupling_frac,
            self.coupling_pos,
            np.stack([local[eu], local[ev]], axis=1),
        )

    def component(self, k: int) -> Component:
        if not (0 <= k < self.n_components):
            raise IndexError(k)
        cache = self.__dict__.setdefault("_component_cache", {})
        if k in cache:
            return cache[k]
        nodes = self.component_nodes(k)
        local = np.full(self.domain.size, -1, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        order, bounds = self._couplings_by_component
        sel = order[bounds[k] : bounds[k + 1]]
        eu, ev, eb = self._edges_by_component
        internal = np.stack([local[eu[eb[k] : eb[k + 1]]], local[ev[eb[k] : eb[k + 1]]]], axis=1)
        sub = Subgraph(
            self.domain,
            nodes,
            local[self.coupling_node[sel]],
            1.0 / self.coupling_frac[sel],
            self.coupling_pos[sel],
            internal,
        )
        comp = Component(k, nodes, float(self.labels[k]), bool(self.mixed[k]), sub)
        cache[k] = comp
        return comp

    @property
    def components(self):
        return [self.component(k) for k in range(self.n_components)]

    def component_containing(self, node: int) -> Component | None:
        k = int(self.component_of[node])
        return None if k < 0 else self.component(k)

    def green(self, z: int, w: int) -> float:
        """Green's function of the complement: 0 unless both nodes share a component."""
        k = self.component_of[z]
        if k < 0 or k != self.component_of[w]:
            return 0.0
        return self.component(int(k)).green_at(z, w)

    def component_sizes(self) -> np.ndarray:
        return np.bincount(self.component_of[self.component_of >= 0], minlength=self.n_components)

    @cached_property
    def frontier_cells(self) -> np.ndarray:
        """Dual-grid cells ``(ci, cj)`` containing a frontier point, unique rows."""
        n, h = self.domain.n, self.domain.h
        ci = np.floor(self.frontier_pos.real / h + n / 2).astype(np.int64)
        cj = np.floor(self.frontier_pos.imag / h + n / 2).astype(np.int64)
        return np.unique(np.stack([ci, cj], axis=1), axis=0) if len(ci) else np.zeros((0, 2), np.int64)

    def frontier_mask(self) -> np.ndarray:
        n = self.domain.n
        mask = np.zeros((n, n), dtype=bool)
        c = self.frontier_cells
        ok = (c[:, 0] >= 0) & (c[:, 0] < n) & (c[:, 1] >= 0) & (c[:, 1] < n)
        mask[c[ok, 0], c[ok, 1]] = True
        return mask

    def frontier_area_fraction(self) -> float:
        """Area of frontier cells relative to the disc."""
        return len(self.frontier_cells) * self.domain.h**2 / math.pi

    def frontier_connected_to_boundary(self) -> bool:
        """Union-find check that every reachable node, and hence every frontier
        point (attached to a reachable edge end), connects to the boundary."""
        if self.open_edges is None:
            raise ExtractionError("extraction did not record its open edges")
        d = self.domain
        lab = _open_edge_labels(d, self.open_edges)
        ok = lab[: d.size][self.reachable] == lab[d.size]
        return bool(np.all(ok))

    def log_radius_field(self, max_exact: int | None = None) -> np.ndarray:
        """``log r_{D\\A}`` per node; ``nan`` on reachable nodes.

        Components with more than ``max_exact`` nodes use the Koebe-type
        estimate ``c * dist(z, frontier)`` with ``c`` fitted on a subsample of
        exactly solved nodes.
        """
        out = np.full(self.domain.size, np.nan)
        for comp in self.components:
            if max_exact is not None and comp.size > max_exact:
                out[comp.nodes] = _koebe_log_radius(comp, rng_index=comp.index)
            else:
                out[comp.nodes] = comp.log_radius_all
        return out


def _koebe_log_radius(comp: Component, samples: int = 64, rng_index: int = 0) -> np.ndarray:
    from scipy.spatial import cKDTree

    tree = cKDTree(np.c_[comp.subgraph.frontier_pos.real, comp.subgraph.frontier_pos.imag])
    z = comp.subgraph.coords
    dist = tree.query(np.c_[z.real, z.imag])[0]
    pick = np.linspace(0, comp.size - 1, min(samples, comp.size)).astype(int)
    exact = np.array([comp.subgraph.log_conformal_radius(int(i)) for i in pick])
    offset = float(np.median(exact - np.log(dist[pick])))
    return np.log(dist) + offset


def _open_edge_labels(domain: LatticeDomain, open_: np.ndarray) -> np.ndarray:
    """Connected-component labels over open edges; index ``size`` is the boundary."""
    nn = domain.size
    v_or_b = np.where(domain.edge_v >= 0, domain.edge_v, nn)
    g = sp.csr_matrix((np.ones(open_.sum()), (domain.edge_u[open_], v_or_b[open_])), shape=(nn + 1, nn + 1))
    return connected_components(g, directed=False)[1]


def _edge_values(domain: LatticeDomain, total: np.ndarray, boundary_value: float):
    fu = total[domain.edge_u]
    fv = np.where(domain.edge_v >= 0, total[np.maximum(domain.edge_v, 0)], boundary_value)
    return fu, fv


def _linear_crossings(fu, fv, lo, hi):
    """Exit flags and first-exit positions (fraction from u) seen from each end."""
    in_u = (fu > lo) & (fu < hi)
    in_v = (fv > lo) & (fv < hi)
    exits = ~(in_u & in_v)
    with np.errstate(divide="ignore", invalid="ignore"):
        lvl_u = np.where(fv >= hi, hi, lo)  # level met walking from u
        t_u = (lvl_u - fu) / (fv - fu)
        lvl_v = np.where(fu >= hi, hi, lo)
        t_v = (lvl_v - fu) / (fv - fu)
    return exits, np.nan_to_num(t_u, nan=0.5), lvl_u, np.nan_to_num(t_v, nan=0.5), lvl_v


def _bridge_crossings(fu, fv, lo, hi, rng, substeps):
    m = substeps
    ne = len(fu)
    dt = EDGE_DURATION / m
    steps = rng.standard_normal((ne, m)) * math.sqrt(dt)
    walk = np.cumsum(steps, axis=1)
    frac = np.arange(1, m + 1) / m
    bridge = walk - frac[None, :] * walk[:, -1:]
    pts = np.empty((ne, m + 1))
    pts[:, 0] = fu
    pts[:, 1:] = fu[:, None] + (fv - fu)[:, None] * frac[None, :] + bridge
    pts[:, -1] = fv
    p, q = pts[:, :-1], pts[:, 1:]
    width = hi - lo
    stay = bridge_stay_probability(p - lo, q - lo, width, dt)
    piece_exit = rng.random((ne, m)) >= stay
    exits = piece_exit.any(axis=1)

    # level hit within an exiting piece
    p_in = (p > lo) & (p < hi)
    q_in = (q > lo) & (q < hi)
    with np.errstate(over="ignore"):
        w_hi = np.exp(-2 * np.clip(hi - p, 0, None) * np.clip(hi - q, 0, None) / dt)
        w_lo = np.exp(-2 * np.clip(p - lo, 0, None) * np.clip(q - lo, 0, None) / dt)
    choose_hi = rng.random((ne, m)) * (w_hi + w_lo) < w_hi

    first = np.argmax(piece_exit, axis=1)
    last = m - 1 - np.argmax(piece_exit[:, ::-1], axis=1)
    rows = np.arange(ne)

    def crossing(j, from_start):
        pj, qj = p[rows, j], q[rows, j]
        entry, other = (pj, qj) if from_start else (qj, pj)
        other_in = q_in[rows, j] if from_start else p_in[rows, j]
        lvl = np.where(other_in, np.where(choose_hi[rows, j], hi, lo), np.where(other >= hi, hi, lo))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(other_in, 0.5, (lvl - entry) / (other - entry))
        s = np.clip(np.nan_to_num(s, nan=0.5), 0.0, 1.0)
        t = (j + (s if from_start else 1 - s)) / m
        return t, lvl

    t_u, lvl_u = crossing(first, True)
    t_v, lvl_v = crossing(last, False)
    return exits, t_u, lvl_u, t_v, lvl_v


def extract_tvs(
    sample: GffSample,
    params: TvsParams,
    rule: str = "linear",
    rng: np.random.Generator | None = None,
    substeps: int = 4,
) -> TvsApprox:
    """Reachable set and complement components for the band ``(-a, b)``.

    ``rng`` drives the edge bridges (required for ``rule="bridge"``).
    """
    if rule not in EDGE_RULES:
        raise ExtractionError(f"unknown edge rule {rule!r}; use one of {EDGE_RULES}")
    domain = sample.domain
    lo, hi = -params.a, params.b
    fu, fv = _edge_values(domain, sample.total, sample.boundary_shift)
    if rule == "linear":
        exits, t_u, lvl_u, t_v, lvl_v = _linear_crossings(fu, fv, lo, hi)
    else:
        if rng is None:
            raise ExtractionError("the bridge rule needs an rng")
        exits, t_u, lvl_u, t_v, lvl_v = _bridge_crossings(fu, fv, lo, hi, rng, substeps)

    # union-find over open edges, node N stands for the boundary
    nn = domain.size
    open_ = ~exits
    lab = _open_edge_labels(domain, open_)
    reach = lab[:nn] == lab[nn]
    if not (lo < sample.boundary_shift < hi):
        reach[:] = False

    # components of unreachable nodes through any edge between them
    u_un = ~reach[domain.edge_u]
    v_int = domain.edge_v >= 0
    v_un = np.zeros_like(u_un)
    v_un[v_int] = ~reach[domain.edge_v[v_int]]
    both = u_un & v_un
    un_nodes = np.flatnonzero(~reach)
    local = np.full(nn, -1, dtype=np.int64)
    local[un_nodes] = np.arange(len(un_nodes))
    cg = sp.csr_matrix(
        (np.ones(both.sum()), (local[domain.edge_u[both]], local[domain.edge_v[both]])),
        shape=(len(un_nodes), len(un_nodes)),
    )
    ncomp, clab = connected_components(cg, directed=False)
    component_of = np.full(nn, -1, dtype=np.int64)
    component_of[un_nodes] = clab

    # frontier points: first exit seen from each reachable end of an exiting edge
    r_u = reach[domain.edge_u] & exits
    r_v = exits & np.where(v_int, reach[np.maximum(domain.edge_v, 0)], True)
    pu, pv = domain.edge_pos_u, domain.edge_pos_v
    pos_u = pu + t_u * (pv - pu)
    pos_v = pu + t_v * (pv - pu)
    frontier_pos = np.r_[pos_u[r_u], pos_v[r_v]]
    frontier_level = np.r_[lvl_u[r_u], lvl_v[r_v]]

    # couplings: reachable u -> component node v, and reachable v/boundary -> component node u
    to_v = r_u & v_int & v_un
    to_u = r_v & u_un
    coupling_node = np.r_[domain.edge_v[to_v], domain.edge_u[to_u]]
    coupling_frac = np.clip(np.r_[1 - t_u[to_v], t_v[to_u]], MIN_FRACTION, 1.0)
    coupling_pos = np.r_[pos_u[to_v], pos_v[to_u]]
    coupling_level = np.r_[lvl_u[to_v], lvl_v[to_u]]

    tvs = TvsApprox(
        domain,
        params,
        reach,
        component_of,
        frontier_pos,
        frontier_level,
        coupling_node,
        coupling_frac,
        coupling_pos,
        coupling_level,
        rule,
        open_,
    )
    if ncomp == 0:
        log.warning("extraction found no complement component (n=%d)", domain.n)
    return tvs


def nesting_check(
    sample: GffSample, inner: TvsParams, outer: TvsParams, seed: int = 0, rule: str = "linear"
) -> bool:
    """Whether the reachable set for the inner band lies inside the outer one.

    For the bridge rule the same bridges are used for both bands (same
    ``seed``), which keeps the inclusion deterministic.
    """
    if inner.a > outer.a or inner.b > outer.b:
        raise ValueError("inner band must be contained in the outer band")
    from .rng import task_rng

    t1 = extract_tvs(sample, inner, rule=rule, rng=task_rng(seed))
    t2 = extract_tvs(sample, outer, rule=rule, rng=task_rng(seed))
    return bool(np.all(t2.reachable[t1.reachable]))


def component_conformal_radius(component: Component, node: int) -> float:
    return component.conformal_radius_at(node)


class FrontierHit(ValueError):
    """The probe point lies in the extracted set itself."""


def radius_law_sample(tvs: TvsApprox, z: complex = 0j) -> float:
    """``log r_D(z) - log r_{D\\A}(z)`` for the component containing ``z``.

    Raises :class:`FrontierHit` if the node at ``z`` is reachable.  Returns 0
    if there is no component at all (degenerate extraction).
    """
    node = tvs.domain.nearest_node(z)
    if tvs.degenerate:
        return 0.0
    comp = tvs.component_containing(node)
    if comp is None:
        raise FrontierHit(f"node at {z} is in the extracted set")
    zz = tvs.domain.coords[node]
    return max(0.0, math.log(disc_conformal_radius(zz)) - comp.log_conformal_radius_at(node))


def markov_resample(sample: GffSample, tvs: TvsApprox, rng: np.random.Generator, count: int | None = None):
    """Fresh field agreeing with ``sample`` on the extracted set.

    Reachable nodes keep their values; each component gets its label plus an
    independent zero-boundary GFF of the component.  Returns a
    :class:`GffSample` (or an array of ``count`` value vectors).
    """
    k = 1 if count is None else count
    total = np.broadcast_to(sample.total, (k, sample.domain.size)).copy()
    if tvs.n_components:
        # the components are disconnected, so one block-diagonal solve samples them independently
        sub = tvs.complement
        fluct = np.asarray(sub.sample(rng, k)).reshape(k, sub.size)
        total[:, sub.nodes] = tvs.labels[tvs.component_of[sub.nodes]] + fluct
    vals = total - sample.boundary_shift
    if count is None:
        return GffSample(sample.domain, vals[0], sample.boundary_shift, None)
    return vals


def export_snapshot(tvs: TvsApprox, path) -> None:
    """Run-length encoded frontier mask and component label table.

    Text header lines (``key: value``) terminated by ``---``, then the payload:
    little-endian int32 run lengths of the row-major ``n x n`` frontier mask
    (alternating, starting with a run of zeros), then ``(id, size, label,
    mixed)`` records as ``<i4 i4 f8 i1``.
    """
    mask = tvs.frontier_mask().ravel()
    change = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.r_[0, change, mask.size]
    runs = np.diff(bounds).astype("<i4")
    if mask.size and mask[0]:
        runs = np.r_[np.array([0], "<i4"), runs]
    table = np.zeros(tvs.n_components, dtype=[("id", "<i4"), ("size", "<i4"), ("label", "<f8"), ("mixed", "i1")])
    table["id"] = np.arange(tvs.n_components)
    table["size"] = tvs.component_sizes()
    table["label"] = tvs.labels
    table["mixed"] = tvs.mixed
    header = (
        f"format: tvs-snapshot-1\nn: {tvs.domain.n}\na: {tvs.params.a!r}\nb: {tvs.params.b!r}\n"
        f"rule: {tvs.rule}\nruns: {len(runs)}\ncomponents: {tvs.n_components}\n---\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(runs.tobytes())
        fh.write(table.tobytes())


def read_snapshot(path):
    """Inverse of :func:`export_snapshot`: ``(header, mask, table)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, _, payload = raw.partition(b"---\n")
    header = dict(line.split(": ", 1) for line in head.decode().strip().splitlines())
    n, nruns = int(header["n"]), int(header["runs"])
    runs = np.frombuffer(payload[: 4 * nruns], dtype="<i4")
    values = np.arange(len(runs)) % 2 == 1
    mask = np.repeat(values, runs).reshape(n, n)
    table = np.frombuffer(
        payload[4 * nruns :], dtype=[("id", "<i4"), ("size", "<i4"), ("label", "<f8"), ("mixed", "i1")]
    )
    return header, mask, table
