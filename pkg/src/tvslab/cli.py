"""Command line entry point: ``tvslab run`` and ``tvslab sweep``.

Exit status: 0 when every embedded acceptance rule passes, 1 when one fails,
2 for an invalid configuration and 3 when the run ran out of resources.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from importlib import metadata

from .experiments import (
    SWEEPABLE,
    ConfigError,
    ExperimentConfig,
    Runner,
    execute,
    load_config,
    parse_value,
    validate,
)
from .lattice import ResourceError

log = logging.getLogger("tvslab")

CSV_FIELDS = (
    "experiment",
    "quantity",
    "parameter",
    "estimate",
    "se",
    "analytic_target",
    "n",
    "samples",
    "seed",
    "passed",
)


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def config_echo(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["z"] = [cfg.z.real, cfg.z.imag]
    return out


def write_rows(path: str, rows: list[dict]) -> None:
    extra = sorted({k for r in rows for k in r} - set(CSV_FIELDS))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[*CSV_FIELDS, *extra])
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def run(cfg: ExperimentConfig, runner: Runner | None = None) -> dict:
    """Run one experiment and write ``report.json`` and ``rows.csv``."""
    validate(cfg)
    os.makedirs(cfg.output_path, exist_ok=True)
    start = time.perf_counter()
    status = "ok"
    rows: list[dict] = []
    try:
        rows = execute(cfg, runner)
    except (MemoryError, ResourceError) as exc:
        status = f"resource exhaustion: {exc}"
        log.error(status)
    flags = [r["passed"] for r in rows if r["passed"] is not None]
    report = {
        "config": config_echo(cfg),
        "rows": rows,
        "passed": status == "ok" and all(flags),
        "status": status,
        "wall_clock_s": time.perf_counter() - start,
        "version": version(),
    }
    write_rows(os.path.join(cfg.output_path, "rows.csv"), rows)
    with open(os.path.join(cfg.output_path, "report.json"), "w") as fh:
        json.dump(_json_safe(report), fh, indent=2)
    return report


def sweep(cfg: ExperimentConfig, axis: str, values: list[str], runner: Runner | None = None) -> list[dict]:
    """One run per value with seed ``seed + i``; writes a merged ``summary.csv``."""
    if axis not in SWEEPABLE:
        raise ConfigError(f"axis: {axis!r} is not sweepable; choose from {', '.join(SWEEPABLE)}")
    if not values:
        raise ConfigError("values: empty list")
    configs = []
    for i, text in enumerate(values):
        c = dataclasses.replace(
            cfg,
            **{axis: parse_value(axis, text)},
            seed=cfg.seed + i if axis != "seed" else parse_value("seed", text),
            output_path=os.path.join(cfg.output_path, f"{axis}={text}"),
        )
        validate(c)
        configs.append(c)
    reports = [run(c, runner) for c in configs]
    merged = []
    for text, rep in zip(values, reports):
        for r in rep["rows"]:
            merged.append({**r, axis: text})
    os.makedirs(cfg.output_path, exist_ok=True)
    write_rows(os.path.join(cfg.output_path, "summary.csv"), merged)
    return reports


def _exit_code(reports: list[dict]) -> int:
    if any(r["status"] != "ok" for r in reports):
        return 3
    return 0 if all(r["passed"] for r in reports) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tvslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "sweep":
            p.add_argument("--axis", required=True)
            p.add_argument("--values", required=True, help="comma separated")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "run":
            reports = [run(cfg)]
        else:
            values = [v for v in args.values.split(",") if v.strip()]
            reports = sweep(cfg, args.axis, values)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for rep in reports:
        for r in rep["rows"]:
            flag = {True: "PASS", False: "FAIL", None: "----"}[r["passed"]]
            print(
                f"{flag} {r['experiment']} {r['quantity']} [{r['parameter']}] "
                f"estimate={r['estimate']:.6g} se={r['se']:.3g} target={r['analytic_target']:.6g}"
            )
        print(f"report: {os.path.join(rep['config']['output_path'], 'report.json')} status={rep['status']}")
    return _exit_code(reports)


if __name__ == "__main__":
    sys.exit(main())
