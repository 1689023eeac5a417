"""Experiment definitions: configuration, validation and the Monte Carlo drivers.

Every experiment is a pure function of its :class:`ExperimentConfig`.  Random
numbers come from per-task Philox streams keyed by ``(seed, task, ...)`` and
results are combined in task order, so the outcome does not depend on how many
workers run the tasks.
"""
from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Iterable

import numpy as np

from . import analytic, chaos, estimators, lattice, oracle, tvs
from .analytic import LAMBDA, InvalidParameters, TvsParams
from .rng import task_rng
from .stats import Estimate, complex_estimate, ks_distance, mean_estimate

EXPERIMENTS = (
    "exit-law",
    "covariance",
    "chaos-moments",
    "conditional-one-point",
    "conditional-three-point",
    "dimension",
    "one-point",
    "two-point",
    "minkowski",
    "content-lemma",
)

MAX_N = 2048
# samples per Monte Carlo task; fixed so results do not depend on the pool size
BATCH = 25


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "exit-law"
    a: float = LAMBDA
    b: float = LAMBDA
    lattice_n: int = 256
    sigma: float = 0.5
    eps: float = 0.0  # 0 selects the default max(8h, 0.04)
    delta: float = 0.1
    samples: int = 1000
    inner_resamples: int = 200
    seed: int = 0
    output_path: str = "tvslab-out"
    z: complex = 0j
    radius_max_exact: int = 600  # larger components use the calibrated Koebe estimate
    edge_rule: str = "linear"
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> TvsParams:
        return TvsParams(self.a, self.b)

    @property
    def h(self) -> float:
        return 2.0 / self.lattice_n

    @property
    def eps_value(self) -> float:
        return self.eps if self.eps > 0 else chaos.default_eps(self.h)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
SWEEPABLE = ("a", "b", "lattice_n", "sigma", "eps", "delta", "samples", "inner_resamples", "seed")


def parse_value(key: str, text: str):
    """Parse a config value; floats accept a ``lambda`` suffix (``2lambda``)."""
    text = text.strip()
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(k for k in _FIELD_TYPES if k != 'extra')}")
    try:
        if kind in ("int",):
            return int(text)
        if kind in ("float",):
            if text.endswith("lambda"):
                head = text[: -len("lambda")].strip().rstrip("*")
                return (float(head) if head else 1.0) * LAMBDA
            return float(text)
        if kind == "complex":
            return complex(text.replace(" ", "").replace("i", "j"))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None
    return text


def load_config(path: str | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Flat ``key = value`` file (``#`` comments) plus ``key=value`` overrides."""
    values: dict = {}
    lines: list[str] = []
    if path:
        with open(path) as fh:
            lines = fh.read().splitlines()
    for raw in [*lines, *overrides]:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, val)
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


# largest |z| at which circle averages are taken, per experiment
_EVALUATION_REACH = {"covariance": 0.54, "chaos-moments": 0.43}


def validate(cfg: ExperimentConfig) -> None:
    """Field-level checks, run before anything is allocated."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown {cfg.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
    try:
        params = cfg.params
    except InvalidParameters as exc:
        raise ConfigError(f"a, b: {exc}") from None
    n = cfg.lattice_n
    if n % 2 or n < lattice.MIN_RESOLUTION or n > MAX_N:
        raise ConfigError(f"lattice_n: must be even in [{lattice.MIN_RESOLUTION}, {MAX_N}], got {n}")
    if not 0 < cfg.sigma < math.sqrt(2):
        raise ConfigError(f"sigma: must lie in (0, sqrt 2), got {cfg.sigma}")
    if cfg.eps and cfg.eps < 3 * cfg.h:
        raise ConfigError(f"eps: must be >= 3h = {3 * cfg.h:.4g}, got {cfg.eps}")
    if cfg.experiment == "minkowski" and not 0 < cfg.delta < params.sigma_c:
        raise ConfigError(f"delta: must lie in (0, sigma_c={params.sigma_c:.4g}), got {cfg.delta}")
    if cfg.samples < 1:
        raise ConfigError("samples: must be positive")
    if cfg.inner_resamples < 2:
        raise ConfigError("inner_resamples: must be at least 2")
    if cfg.experiment in ("conditional-one-point", "conditional-three-point") and cfg.sigma >= params.sigma_c:
        raise ConfigError(
            f"sigma: the conditional identities need sigma < sigma_c = {params.sigma_c:.4g}, got {cfg.sigma}"
        )
    if cfg.experiment == "conditional-three-point" and not math.isclose(cfg.a, cfg.b):
        raise ConfigError("a, b: the three-point conditional formula needs a == b")
    if cfg.experiment == "dimension" and len(estimators.dyadic_scales(cfg.h)) < 4:
        raise ConfigError("lattice_n: box counting needs 4 dyadic scales in [4h, 1/8], use lattice_n >= 512")
    if abs(cfg.z) >= 1:
        raise ConfigError("z: must lie inside the unit disc")
    reach = _EVALUATION_REACH.get(cfg.experiment)
    if reach is not None and reach + cfg.eps_value + 2 * cfg.h >= 1:
        raise ConfigError(
            f"eps: circles of radius {cfg.eps_value:.4g} around points at |z| <= {reach:.3g} leave the disc; "
            "lower eps or raise lattice_n"
        )
    if cfg.edge_rule not in tvs.EDGE_RULES:
        raise ConfigError(f"edge_rule: one of {tvs.EDGE_RULES}")


# ---------------------------------------------------------------------------
# execution

def pool_size() -> int:
    env = os.environ.get("TVSLAB_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cap * 4))
        except ValueError:
            pass
    return cap


class Runner:
    """Maps a top-level function over task indices; results come back in task order."""

    def __init__(self, workers: int | None = None):
        self.workers = pool_size() if workers is None else workers

    def map(self, fn: Callable, tasks) -> list:
        tasks = list(tasks)
        if self.workers <= 1 or len(tasks) <= 1:
            return [fn(t) for t in tasks]
        with ProcessPoolExecutor(max_workers=min(self.workers, len(tasks))) as ex:
            return list(ex.map(fn, tasks))


_DOMAINS: dict[int, lattice.LatticeDomain] = {}


def get_domain(n: int) -> lattice.LatticeDomain:
    if n not in _DOMAINS:
        _DOMAINS[n] = lattice.build_domain(n)
    return _DOMAINS[n]


def _batches(total: int, size: int = BATCH) -> list[tuple[int, int]]:
    return [(i, min(size, total - i * size)) for i in range((total + size - 1) // size)]


def row(cfg: ExperimentConfig, quantity: str, parameter: str, estimate, se, target, passed, samples=None, **info) -> dict:
    out = {
        "experiment": cfg.experiment,
        "quantity": quantity,
        "parameter": parameter,
        "estimate": float(estimate),
        "se": float(se),
        "analytic_target": float(target) if target is not None else float("nan"),
        "n": cfg.lattice_n,
        "samples": cfg.samples if samples is None else samples,
        "seed": cfg.seed,
        "passed": None if passed is None else bool(passed),
    }
    out.update(info)
    return out


# ---------------------------------------------------------------------------
# exit law (no lattice)

EXIT_BANDS = ((1, 1), (2, 2), (1, 3))
EXIT_TIMES = (0.5, 1.0, 2.0, 4.0)


def _exit_task(cfg: ExperimentConfig, band: tuple[float, float], task: tuple[int, int]):
    index, count = task
    params = TvsParams(*band)
    return oracle.simulate_params(params, count, task_rng(cfg.seed, 1, index, _band_key(band)))


def _band_key(band) -> int:
    return int(round(band[0] * 1e6)) * 7919 + int(round(band[1] * 1e6))


def run_exit_law(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    bands = [(cfg.a, cfg.b)] if cfg.extra.get("single_band") else [(x * LAMBDA, y * LAMBDA) for x, y in EXIT_BANDS]
    paths = cfg.samples
    rows = []
    for band in bands:
        params = TvsParams(*band)
        law = params.exit_law()
        tau = np.concatenate(runner.map(partial(_exit_task, cfg, band), _batches(paths, 10_000)))
        ks = ks_distance(tau, lambda t: analytic.exit_cdf(law, t))
        tag = f"a={band[0]:.6g},b={band[1]:.6g}"
        for t in EXIT_TIMES:
            est = mean_estimate(tau > t)
            rows.append(row(cfg, "survival", f"{tag},t={t}", est.mean, est.se, analytic.exit_survival(law, t), ks <= 0.01, paths, ks=ks))
        rows.append(row(cfg, "ks_distance", tag, ks, 0.0, 0.0, ks <= 0.01, paths))
        for frac in (0.5, 0.8):
            s = frac * params.sigma_c
            est = mean_estimate(np.exp(s * s * tau / 2))
            target = analytic.exit_laplace(params, s)
            rows.append(row(cfg, "laplace", f"{tag},sigma={frac}sigma_c", est.mean, est.se, target, est.agrees(target), paths))
    return rows


# ---------------------------------------------------------------------------
# covariance of circle averages

COVARIANCE_PAIRS = (
    (-0.3 + 0j, 0.3 + 0j),
    (0.2j, 0.5 + 0.2j),
    (-0.4 - 0.2j, 0.1 + 0.3j),
    (0.45 + 0j, 0.45j),
    (-0.2 - 0.5j, 0.3 - 0.4j),
)


def _cov_task(cfg: ExperimentConfig, pts: np.ndarray, task: tuple[int, int]):
    index, count = task
    dom = get_domain(cfg.lattice_n)
    op, _ = chaos.circle_operator(dom, pts, cfg.eps_value)
    vals = lattice.gff_values(dom, task_rng(cfg.seed, 2, index), count).reshape(count, dom.size)
    return (op @ vals.T).T


def run_covariance(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    dom = get_domain(cfg.lattice_n)
    eps = cfg.eps_value
    nodes = np.array([[dom.nearest_node(z), dom.nearest_node(w)] for z, w in COVARIANCE_PAIRS]).ravel()
    avgs = np.concatenate(runner.map(partial(_cov_task, cfg, nodes), _batches(cfg.samples)))
    rows = []
    for k, (i, j) in enumerate(nodes.reshape(-1, 2)):
        z, w = dom.coords[i], dom.coords[j]
        prod = avgs[:, 2 * k] * avgs[:, 2 * k + 1]  # centered field: E[XY] is the covariance
        est = mean_estimate(prod)
        target = float(analytic.disc_green(z, w))
        lat = lattice.circle_average_covariance(dom, z, w, eps)
        rows.append(
            row(cfg, "covariance", f"z={z:.4g},w={w:.4g}", est.mean, est.se, target, est.agrees(target),
                lattice_target=lat, bias=lat - target)
        )
    return rows


# ---------------------------------------------------------------------------
# chaos moments

THREE_DISC_RADIUS = 0.08
THREE_DISC_CENTERS = tuple(0.35 * np.exp(2j * np.pi * k / 3) for k in range(3))


def _chaos_task(cfg: ExperimentConfig, regions: list, task: tuple[int, int]):
    index, count = task
    dom = get_domain(cfg.lattice_n)
    vals = lattice.gff_values(dom, task_rng(cfg.seed, 3, index), count).reshape(count, dom.size)
    out = []
    for reg in regions:
        rc = chaos.RegionChaos(dom, reg, cfg.sigma, cfg.eps_value)
        out.append(rc.chaos(vals).sum(axis=1) * dom.h**2)
    return np.stack(out, axis=1)


def run_chaos_moments(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    dom = get_domain(cfg.lattice_n)
    radius = float(cfg.extra.get("region_radius", 0.3))
    u = chaos.disc_region(dom, 0j, radius)
    discs = [chaos.disc_region(dom, c, THREE_DISC_RADIUS) for c in THREE_DISC_CENTERS]
    pairs = np.concatenate(runner.map(partial(_chaos_task, cfg, [u, *discs]), _batches(cfg.samples)))
    s = cfg.sigma
    rows = []
    pts, w = analytic.disc_nodes(0j, radius, 32)
    one = chaos.one_point_target(pts, w, s)
    re, im = complex_estimate(pairs[:, 0])
    rows.append(row(cfg, "one_point_real", f"U=disc(0,{radius})", re.mean, re.se, one, re.agrees(one)))
    rows.append(row(cfg, "one_point_imag", f"U=disc(0,{radius})", im.mean, im.se, 0.0, im.agrees(0.0)))
    two = chaos.two_point_target(0j, radius, s)
    est = mean_estimate(np.abs(pairs[:, 0]) ** 2)
    rows.append(row(cfg, "two_point", f"U=disc(0,{radius})", est.mean, est.se, two, est.agrees(two, rel=0.05)))
    cos = 2 * pairs[:, 1:].real
    est = mean_estimate(np.prod(cos, axis=1))
    rules = [analytic.disc_nodes(c, THREE_DISC_RADIUS, 8) for c in THREE_DISC_CENTERS]
    h_int = chaos.triple_target(*rules[0], *rules[1], *rules[2], s)
    # the lattice regions differ from the discs by a few boundary cells; rescale by cell area
    area_ratio = np.prod([len(d) * dom.h**2 / (math.pi * THREE_DISC_RADIUS**2) for d in discs])
    target = h_int * area_ratio
    rows.append(
        row(cfg, "cosine_triple", f"3 discs r={THREE_DISC_RADIUS}", est.mean, est.se, target, est.agrees(target),
            continuum_target=h_int)
    )
    return rows


# ---------------------------------------------------------------------------
# extraction ensembles

def _extract(cfg: ExperimentConfig, params: TvsParams, index: int, stream: int):
    dom = get_domain(cfg.lattice_n)
    rng = task_rng(cfg.seed, stream, index)
    sample = lattice.GffSample(dom, lattice.gff_values(dom, rng), 0.0, cfg.seed)
    return sample, tvs.extract_tvs(sample, params, rule=cfg.edge_rule, rng=rng)


def _radius_task(cfg: ExperimentConfig, index: int) -> float:
    _, t = _extract(cfg, cfg.params, index, 4)
    try:
        return tvs.radius_law_sample(t, cfg.z)
    except tvs.FrontierHit:
        return math.inf


def radius_law_values(cfg: ExperimentConfig, runner: Runner) -> np.ndarray:
    return np.array(runner.map(partial(_radius_task, cfg), range(cfg.samples)))


def run_radius_law(cfg: ExperimentConfig, runner: Runner, values: np.ndarray | None = None) -> list[dict]:
    """KS comparison of ``-log r_{D\\A}(z)`` with the exit law (hits count as ``t = inf``)."""
    t = radius_law_values(cfg, runner) if values is None else values
    law = cfg.params.exit_law()
    ks = ks_distance(t, lambda x: analytic.exit_cdf(law, x))
    hits = float(np.mean(np.isinf(t)))
    return [row(cfg, "radius_law_ks", f"z={cfg.z}", ks, 0.0, 0.0, ks <= 0.08, hit_fraction=hits)]


ONE_POINT_EPS = tuple(math.exp(-x) for x in (1.5, 1.875, 2.25, 2.625, 3.0))


def run_one_point(cfg: ExperimentConfig, runner: Runner, values: np.ndarray | None = None) -> list[dict]:
    t = radius_law_values(cfg, runner) if values is None else values
    table = estimators.one_point_probability(t, cfg.z, ONE_POINT_EPS, cfg.params)
    rows = [
        row(cfg, "one_point", f"eps={r.eps:.6g}", r.p, r.se, r.series, abs(r.p - r.series) <= 3 * r.se,
            asymptotic=r.asymptotic)
        for r in table
    ]
    slope = estimators.one_point_slope(table)
    target = 2 - cfg.params.dimension
    rows.append(row(cfg, "one_point_slope", "eps in [e^-3, e^-1.5]", slope, 0.0, target, abs(slope - target) <= 0.1))
    rows.extend(run_radius_law(cfg, runner, t))
    return rows


def _dimension_task(cfg: ExperimentConfig, index: int) -> float:
    _, t = _extract(cfg, cfg.params, index, 5)
    return estimators.box_count(t).slope


def dimension_window(d: float) -> tuple[float, float]:
    if math.isclose(d, 15 / 8):
        return 1.75, 1.95
    return d - 0.1, d + 0.1


def run_dimension(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    slopes = np.array(runner.map(partial(_dimension_task, cfg), range(cfg.samples)))
    ok = slopes[np.isfinite(slopes)]
    est = mean_estimate(ok) if len(ok) > 1 else Estimate(float("nan"), float("nan"), len(ok))
    d = cfg.params.dimension
    lo, hi = dimension_window(d)
    return [row(cfg, "box_slope", f"a={cfg.a:.6g},b={cfg.b:.6g}", est.mean, est.se, d, lo <= est.mean <= hi,
                fitted=len(ok))]


TWO_POINT_DELTAS = (0.03, 0.02, 0.012)
TWO_POINT_X = (-0.125 + 0j, 0.125 + 0j)


def _two_point_task(cfg: ExperimentConfig, index: int):
    _, t = _extract(cfg, cfg.params, index, 6)
    x, y = TWO_POINT_X
    return estimators.distance_to_set(t, x), estimators.distance_to_set(t, y)


def run_two_point(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    dist = np.array(runner.map(partial(_two_point_task, cfg), range(cfg.samples)))
    x, y = TWO_POINT_X
    res = [estimators.two_point_probability(dist, x, y, d, cfg.params) for d in TWO_POINT_DELTAS]
    rows = [row(cfg, "two_point", f"delta={r.delta}", r.p, r.se, None, None, scaling=r.scaling) for r in res]
    slope = estimators.delta_slope(res)
    target = 2 * (2 - cfg.params.dimension)
    rows.append(row(cfg, "two_point_delta_slope", f"|x-y|={abs(x - y)}", slope, 0.0, target, slope >= target - 0.15))
    return rows


def _minkowski_task(cfg: ExperimentConfig, index: int) -> float:
    _, t = _extract(cfg, cfg.params, index, 7)
    return estimators.minkowski_measure(t, cfg.delta, max_exact=cfg.radius_max_exact).total_mass


def run_minkowski(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    masses = np.array(runner.map(partial(_minkowski_task, cfg), range(cfg.samples)))
    est = mean_estimate(masses)
    target = analytic.expected_measure_mass(cfg.params, cfg.delta)
    limit = analytic.expected_measure_mass(cfg.params, 0.0)
    return [
        row(cfg, "minkowski_mass", f"delta={cfg.delta}", est.mean, est.se, target, est.agrees(target, rel=0.10),
            limit=limit, radius_mode=f"koebe>{cfg.radius_max_exact}")
    ]


def _conditional_task(cfg: ExperimentConfig, index: int):
    sample, t = _extract(cfg, cfg.params, index, 8)
    dom = sample.domain
    f = np.zeros(dom.size)
    f[chaos.disc_region(dom, 0j, float(cfg.extra.get("region_radius", 0.3)))] = 1.0
    rng = task_rng(cfg.seed, 9, index)
    (re, im), rhs = chaos.conditional_one_point(sample, t, cfg.inner_resamples, f, cfg.sigma, rng, cfg.eps_value)
    return re, im, rhs


def run_conditional_one_point(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    res = runner.map(partial(_conditional_task, cfg), range(cfg.samples))
    rows = []
    agree = 0
    for i, (re, im, rhs) in enumerate(res):
        ok = re.agrees(rhs.real) and im.agrees(rhs.imag)
        agree += ok
        rows.append(row(cfg, "conditional_real", f"outer={i}", re.mean, re.se, rhs.real, ok, cfg.inner_resamples,
                        imag=im.mean, imag_se=im.se, imag_target=rhs.imag))
    need = math.ceil(0.85 * len(res))
    rows.append(row(cfg, "conditional_agreement", f">= {need} of {len(res)}", agree, 0.0, need, agree >= need))
    return rows


def _conditional_three_task(cfg: ExperimentConfig, index: int):
    sample, t = _extract(cfg, cfg.params, index, 10)
    dom = sample.domain
    r = float(cfg.extra.get("region_radius", 0.06))
    regions = [chaos.disc_region(dom, c, r) for c in THREE_DISC_CENTERS]
    rhs = chaos.conditional_three_point_rhs(t, regions, cfg.sigma)
    evaluators = [chaos.RegionChaos(dom, reg, cfg.sigma, cfg.eps_value) for reg in regions]
    rng = task_rng(cfg.seed, 11, index)
    vals = tvs.markov_resample(sample, t, rng, cfg.inner_resamples)
    est = mean_estimate(chaos.cosine_triple_samples(vals, evaluators, sample.boundary_shift))
    return est, rhs


def run_conditional_three_point(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    res = runner.map(partial(_conditional_three_task, cfg), range(cfg.samples))
    rows = []
    for i, (est, rhs) in enumerate(res):
        rows.append(row(cfg, "conditional_triple", f"outer={i}", est.mean, est.se, rhs.value, est.agrees(rhs.value),
                        cfg.inner_resamples, lower_bound=rhs.lower_bound, bound_holds=rhs.value >= rhs.lower_bound - 1e-12))
    return rows


def run_content_lemma(cfg: ExperimentConfig, runner: Runner) -> list[dict]:
    steps = (0.1, 0.05, 0.025)
    _, r, w = estimators.segment_radius_field(breaks=steps)
    sc = math.sqrt(2)  # a segment has dimension 1
    res = estimators.content_lemma(r, w, sc, steps)
    return [row(cfg, "content_ratio", "u=delta in {0.1,0.05,0.025}", res.ratio, 0.0, 1.0, abs(res.ratio - 1) <= 0.02, 0,
                j_limit=res.j_limit, f_limit=res.f_limit)]


DRIVERS: dict[str, Callable] = {
    "exit-law": run_exit_law,
    "covariance": run_covariance,
    "chaos-moments": run_chaos_moments,
    "conditional-one-point": run_conditional_one_point,
    "conditional-three-point": run_conditional_three_point,
    "dimension": run_dimension,
    "one-point": run_one_point,
    "two-point": run_two_point,
    "minkowski": run_minkowski,
    "content-lemma": run_content_lemma,
}


def execute(cfg: ExperimentConfig, runner: Runner | None = None) -> list[dict]:
    validate(cfg)
    return DRIVERS[cfg.experiment](cfg, runner or Runner())
