"""Command-line front end: config files, runs, spectra, and sweeps.

Configs are sectioned ``key = value`` text.  Every emitted data file is
whitespace-delimited UTF-8 with ``#``-prefixed headers, floats printed in
shortest round-trip form, and no timestamps (those live only in the JSON
summaries), so identical configs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .core import PhysicalParams
from .linsys import ControllabilityError, linearize
from .matreq import SynthesisError, abscissa
from .sim import (
    STRATEGIES,
    PerturbationSpec,
    RunConfig,
    TrajectoryRecord,
    run,
    synthesise,
)
from .synth import closed_loop_matrix, controller_to_json

__all__ = [
    "ConfigError",
    "SweepSpec",
    "read_table",
    "write_table",
    "write_trajectory",
    "write_snapshots",
    "write_summary",
    "cmd_simulate",
    "cmd_synthesize",
    "cmd_spectrum",
    "cmd_sweep",
    "main",
]

# command-line strategy vocabulary -> internal names
_STRATEGY_ALIASES = {
    "sof": "output_feedback",
    "full": "full_state",
    "luenberger": "luenberger",
    "none": "none",
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_STABILISED = 2
EXIT_SYNTHESIS_FAILED = 3


class ConfigError(Exception):
    """Unusable configuration; the message names the offending key or line."""


def _resolve_strategy(name: str) -> str:
    name = name.strip().lower()
    if name in _STRATEGY_ALIASES:
        return _STRATEGY_ALIASES[name]
    if name in STRATEGIES:
        return name
    raise ConfigError(
        f"unknown strategy {name!r}; expected one of {sorted(_STRATEGY_ALIASES)}"
    )


# ---------------------------------------------------------------------------
# data files


def _fmt(x: float) -> str:
    """Shortest decimal that round-trips to the same float."""
    return repr(float(x))


def write_table(path: Path, names: list[str], rows: np.ndarray, extra_header: list[str] = ()) -> None:
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, len(names))
    if rows.size and rows.shape[1] != len(names):
        raise ValueError(f"{len(names)} column names for {rows.shape[1]} columns")
    lines = [f"# {line}" for line in extra_header]
    lines.append("# " + " ".join(names))
    for row in rows:
        lines.append(" ".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    """Read a file written by write_table; returns (column names, rows)."""
    names: list[str] = []
    data: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                # the last comment line before the data names the columns
                if not data:
                    names = line[1:].split()
                continue
            data.append([float(tok) for tok in line.split()])
    rows = np.array(data, dtype=float) if data else np.zeros((0, len(names)))
    return names, rows


def config_hash(config: RunConfig) -> str:
    doc = json.dumps(config.describe(), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def write_trajectory(path: Path, record: TrajectoryRecord) -> None:
    """Columns t, ``|h-1|``, cost, eta_1..eta_M, and est_err when present."""
    m = record.eta.shape[1] if record.eta.ndim == 2 else 0
    names = ["t", "hnorm", "cost"] + [f"eta{i + 1}" for i in range(m)]
    cols = [record.times, record.hnorm, record.cost] + [record.eta[:, i] for i in range(m)]
    if record.est_err is not None:
        names.append("est_err")
        cols.append(record.est_err)
    rows = np.column_stack(cols) if record.times.size else np.zeros((0, len(names)))
    write_table(path, names, rows, extra_header=[f"config {config_hash(record.config)}"])


def write_snapshots(out_dir: Path, record: TrajectoryRecord) -> list[Path]:
    paths = []
    x = record.config.grid.nodes
    for snap in record.snapshots:
        names = ["x", "h", "f"]
        cols = [x, snap.state.h, snap.control_field]
        if snap.estimate is not None:
            names.append("estimate")
            cols.append(snap.estimate)
        path = out_dir / f"snapshot_t{snap.time:g}.dat"
        write_table(path, names, np.column_stack(cols), extra_header=[f"time {_fmt(snap.time)}"])
        paths.append(path)
    return paths


def _jsonable(value: Any) -> Any:
    """Deep copy with non-finite floats mapped to None for strict JSON."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_summary(path: Path, record: TrajectoryRecord, **extra: Any) -> dict[str, Any]:
    doc = {
        "verdict": record.verdict,
        "cost": float(record.cost[-1]) if record.cost.size else math.nan,
        "decay_rate": record.decay_rate,
        "decay_r2": record.decay_r2,
        "final_norm": record.final_norm,
        "mass_error": record.mass_error,
        "params": record.config.describe(),
        "seed": record.config.perturbation.seed,
        "config_hash": config_hash(record.config),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "meta": record.meta,
        **extra,
    }
    doc = _jsonable(doc)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


# ---------------------------------------------------------------------------
# config ingestion


def _load_config(path: str | Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        # configparser reports offending line numbers in its message
        raise ConfigError(f"malformed config: {exc}") from exc
    return parser


def _get(parser: configparser.ConfigParser, section: str, key: str, cast, default=None):
    try:
        raw = parser.get(section, key)
    except (configparser.NoSectionError, configparser.NoOptionError):
        if default is None:
            raise ConfigError(f"config missing required key [{section}] {key}") from None
        # string defaults share the cast path so "none"/"auto" sentinels resolve
        return cast(default) if isinstance(default, str) else default
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r} ({exc})") from exc


def _float_list(raw: str) -> tuple[float, ...]:
    if raw.strip().lower().startswith("logspace:"):
        try:
            _, lo, hi, count = raw.strip().split(":")
            return tuple(float(v) for v in np.geomspace(float(lo), float(hi), int(count)))
        except ValueError as exc:
            raise ValueError(f"expected logspace:lo:hi:count, got {raw!r}") from exc
    return tuple(float(tok) for tok in raw.replace(",", " ").split())


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.replace(",", " ").split())


def _sentinel_none(raw: str):
    return None if raw.strip().lower() in ("", "none", "auto") else int(raw)


def build_run_config(
    parser: configparser.ConfigParser,
    *,
    strategy: str | None = None,
    reynolds: float | None = None,
    m: int | None = None,
    p: int | None = None,
    seed: int | None = None,
    snapshot_times: tuple[float, ...] | None = None,
) -> RunConfig:
    """RunConfig from a parsed config file plus command-line overrides."""
    re_val = reynolds if reynolds is not None else _get(parser, "physics", "reynolds", float)
    params = PhysicalParams(
        reynolds=re_val,
        capillary=_get(parser, "physics", "capillary", float, 0.05),
        theta=_get(parser, "physics", "theta", float, math.pi / 3),
        length=_get(parser, "physics", "length", float, 30.0),
        beta=_get(parser, "physics", "beta", float, 0.5),
    )
    raw_strategy = strategy if strategy is not None else _get(parser, "control", "strategy", str, "sof")
    perturbation = PerturbationSpec(
        modes=_get(parser, "run", "perturbation_modes", _int_list, (1, 2, 3)),
        amplitude=_get(parser, "run", "perturbation_amplitude", float, 0.1),
        noise=_get(parser, "run", "perturbation_noise", float, 1e-3),
        seed=seed if seed is not None else _get(parser, "run", "seed", int, 0),
    )
    snaps = (
        snapshot_times
        if snapshot_times is not None
        else _get(parser, "run", "snapshot_times", _float_list, ())
    )
    try:
        return RunConfig.build(
            params,
            n_nodes=_get(parser, "grid", "n_nodes", int, 128),
            m=m if m is not None else _get(parser, "control", "m", int, 5),
            p=p if p is not None else _get(parser, "control", "p", int, 5),
            omega=_get(parser, "control", "omega", float, 0.1),
            strategy=_resolve_strategy(raw_strategy),
            estimator_groups=_get(parser, "control", "estimator_groups", _sentinel_none, "none"),
            burn_in_time=_get(parser, "run", "burn_in_time", float, 300.0),
            control_time=_get(parser, "run", "control_time", float, 100.0),
            dt_init=_get(parser, "run", "dt_init", float, 1e-3),
            rtol=_get(parser, "run", "rtol", float, 1e-6),
            perturbation=perturbation,
            epsilon=_get(parser, "run", "epsilon", float, 1e-3),
            h_max=_get(parser, "run", "h_max", float, 10.0),
            h_min=_get(parser, "run", "h_min", float, 1e-3),
            sample_interval=_get(parser, "run", "sample_interval", float, 0.1),
            snapshot_times=snaps,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SweepSpec:
    """Grid of (Re, M, P) points sharing everything else with the template."""

    reynolds: tuple[float, ...]
    m_list: tuple[int, ...]
    p_list: tuple[int, ...]
    strategy: str
    template: RunConfig
    workers: int
    master_seed: int = 0

    def __post_init__(self) -> None:
        if not self.reynolds or not self.m_list or not self.p_list:
            raise ConfigError("sweep lists must be non-empty")
        if any(r <= 0 for r in self.reynolds):
            raise ConfigError("sweep reynolds values must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    def points(self) -> list[tuple[int, float, int, int]]:
        grid = itertools.product(self.reynolds, self.m_list, self.p_list)
        return [(i, r, m, p) for i, (r, m, p) in enumerate(grid)]

    def point_config(self, index: int, re_val: float, m: int, p: int) -> RunConfig:
        t = self.template
        params = PhysicalParams(
            reynolds=re_val,
            capillary=t.params.capillary,
            theta=t.params.theta,
            length=t.params.length,
            beta=t.params.beta,
        )
        perturbation = PerturbationSpec(
            modes=t.perturbation.modes,
            amplitude=t.perturbation.amplitude,
            noise=t.perturbation.noise,
            seed=self.master_seed ^ index,
        )
        return RunConfig.build(
            params,
            n_nodes=t.grid.n_nodes,
            m=m,
            p=p,
            omega=t.actuators.omega,
            strategy=self.strategy,
            estimator_groups=t.estimator_groups,
            burn_in_time=t.burn_in_time,
            control_time=t.control_time,
            dt_init=t.dt_init,
            rtol=t.rtol,
            perturbation=perturbation,
            epsilon=t.epsilon,
            h_max=t.h_max,
            h_min=t.h_min,
            sample_interval=t.sample_interval,
        )


def build_sweep_spec(parser: configparser.ConfigParser, args: argparse.Namespace) -> SweepSpec:
    template = build_run_config(
        parser,
        reynolds=_get(parser, "physics", "reynolds", float, 1.0),
        strategy="none",
        seed=0,
    )
    raw_strategy = args.strategy or _get(parser, "sweep", "strategy", str, "luenberger")
    workers = args.workers or _get(parser, "sweep", "workers", int, os.cpu_count() or 1)
    master_seed = args.seed if args.seed is not None else _get(parser, "sweep", "master_seed", int, 0)
    return SweepSpec(
        reynolds=_get(parser, "sweep", "reynolds", _float_list, ()),
        m_list=_get(parser, "sweep", "m_list", _int_list, (3, 5, 7, 9, 11)),
        p_list=_get(parser, "sweep", "p_list", _int_list, ()),
        strategy=_resolve_strategy(raw_strategy),
        template=template,
        workers=workers,
        master_seed=master_seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(args: argparse.Namespace) -> Path:
    raw = args.out_dir or os.environ.get("FILMCTL_OUT_DIR") or "."
    path = Path(raw)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_snapshot_times(raw: str | None) -> tuple[float, ...] | None:
    if raw is None:
        return None
    return _float_list(raw)


def cmd_simulate(args: argparse.Namespace) -> int:
    parser = _load_config(args.config)
    config = build_run_config(
        parser,
        strategy=args.strategy,
        reynolds=args.re,
        m=args.m,
        p=args.p,
        seed=args.seed,
        snapshot_times=_parse_snapshot_times(args.snapshot_times),
    )
    out = _out_dir(args)
    record = run(config)
    write_trajectory(out / "trajectory.dat", record)
    write_snapshots(out, record)
    write_summary(out / "summary.json", record)
    cost = f"{record.cost[-1]:.6g}" if record.cost.size else "n/a"
    print(f"verdict: {record.verdict}  final |h-1| = {record.final_norm:.3e}  cost = {cost}")
    if record.verdict == "stabilised":
        return EXIT_OK
    if record.verdict == "synthesis_failed":
        return EXIT_SYNTHESIS_FAILED
    return EXIT_NOT_STABILISED


def cmd_synthesize(args: argparse.Namespace) -> int:
    parser = _load_config(args.config)
    config = build_run_config(
        parser, strategy=args.strategy, reynolds=args.re, m=args.m, p=args.p, seed=args.seed
    )
    out = _out_dir(args)
    try:
        controller = synthesise(config)
    except (SynthesisError, ControllabilityError) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS_FAILED
    if controller is None:
        print("strategy 'none' has nothing to synthesise", file=sys.stderr)
        return EXIT_USAGE
    (out / "controller.json").write_text(controller_to_json(controller), encoding="utf-8")
    sys_lin = linearize(config.params, config.grid, config.actuators, config.observers)
    a_cl = closed_loop_matrix(sys_lin, controller)
    print(f"strategy: {config.strategy}")
    print(f"closed-loop abscissa: {abscissa(a_cl):.6g}")
    print(f"wrote {out / 'controller.json'}")
    return EXIT_OK


def cmd_spectrum(args: argparse.Namespace) -> int:
    parser = _load_config(args.config)
    config = build_run_config(
        parser, strategy=args.strategy, reynolds=args.re, m=args.m, p=args.p, seed=args.seed
    )
    out = _out_dir(args)
    sys_lin = linearize(config.params, config.grid, config.actuators, config.observers)
    open_eigs = np.linalg.eigvals(sys_lin.a_res)
    open_eigs = open_eigs[np.argsort(-open_eigs.real)]
    n_unstable = int(np.sum(open_eigs.real > 1e-10))
    write_table(
        out / "spectrum_open.dat",
        ["real", "imag"],
        np.column_stack([open_eigs.real, open_eigs.imag]),
        extra_header=[f"unstable {n_unstable}", f"config {config_hash(config)}"],
    )
    print(f"open-loop unstable modes: {n_unstable}")
    if config.strategy == "none":
        return EXIT_OK
    try:
        controller = synthesise(config)
    except (SynthesisError, ControllabilityError) as exc:
        print(f"closed loop omitted, synthesis failed: {exc}")
        return EXIT_OK
    closed = np.linalg.eigvals(closed_loop_matrix(sys_lin, controller))
    closed = closed[np.argsort(-closed.real)]
    write_table(
        out / "spectrum_closed.dat",
        ["real", "imag"],
        np.column_stack([closed.real, closed.imag]),
        extra_header=[f"abscissa {_fmt(closed.real.max())}", f"config {config_hash(config)}"],
    )
    print(f"closed-loop abscissa: {closed.real.max():.6g}")
    return EXIT_OK


def _sweep_point(payload: tuple[SweepSpec, int, float, int, int]):
    spec, index, re_val, m, p = payload
    config = spec.point_config(index, re_val, m, p)
    try:
        record = run(config)
    except Exception as exc:  # a crashed point must not abort the sweep
        return (re_val, m, p, "blow_up", math.nan, f"crashed: {exc}")
    cost = float(record.cost[-1]) if record.cost.size else math.nan
    return (re_val, m, p, record.verdict, cost, "")

def cmd_sweep(args: argparse.Namespace) -> int:
    parser = _load_config(args.config)
    spec = build_sweep_spec(parser, args)
    out = _out_dir(args)
    jobs = [(spec, i, r, m, p) for i, r, m, p in spec.points()]
    if spec.workers == 1:
        results = [_sweep_point(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    results.sort(key=lambda r: (r[0], r[1], r[2]))

    buckets: dict[str, list[tuple[float, int, int]]] = {"success": [], "failure": [], "gaps": []}
    for re_val, m, p, verdict, _cost, _note in results:
        if verdict == "stabilised":
            buckets["success"].append((re_val, m, p))
        elif verdict == "synthesis_failed":
            buckets["gaps"].append((re_val, m, p))
        else:
            buckets["failure"].append((re_val, m, p))
    for name, rows in buckets.items():
        write_table(
            out / f"{spec.strategy}_{name}.dat",
            ["R", "M", "P"],
            np.array(rows, dtype=float).reshape(-1, 3),
        )
    summary = {
        "strategy": spec.strategy,
        "master_seed": spec.master_seed,
        "counts": {k: len(v) for k, v in buckets.items()},
        "points": [
            {"reynolds": r, "m": m, "p": p, "verdict": v, "cost": c, "note": note or None}
            for r, m, p, v, c, note in results
        ],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / f"{spec.strategy}_sweep.json").write_text(
        json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"sweep {spec.strategy}: {summary['counts']['success']} stabilised, "
        f"{summary['counts']['failure']} failed, {summary['counts']['gaps']} synthesis gaps"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to a sectioned key = value config file")
    sub.add_argument("--strategy", help="sof | luenberger | full | none")
    sub.add_argument("--re", type=float, help="override Reynolds number")
    sub.add_argument("--m", type=int, help="override actuator count")
    sub.add_argument("--p", type=int, help="override observer count")
    sub.add_argument("--seed", type=int, help="override run seed (master seed for sweeps)")
    sub.add_argument("--out-dir", help="output directory (default $FILMCTL_OUT_DIR or .)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filmctl",
        description="falling-film feedback control: simulate, synthesize, spectrum, sweep",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="closed-loop run with burn-in and verdict")
    _add_common(p_sim)
    p_sim.add_argument("--snapshot-times", help="comma-separated times, burn-in negative")
    p_sim.set_defaults(func=cmd_simulate)

    p_syn = sub.add_parser("synthesize", help="controller synthesis only")
    _add_common(p_syn)
    p_syn.set_defaults(func=cmd_synthesize)

    p_spec = sub.add_parser("spectrum", help="open- and closed-loop eigenvalue report")
    _add_common(p_spec)
    p_spec.set_defaults(func=cmd_spectrum)

    p_sweep = sub.add_parser("sweep", help="(Re, M, P) success map")
    _add_common(p_sweep)
    p_sweep.add_argument("--workers", type=int, help="parallel worker processes")
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
