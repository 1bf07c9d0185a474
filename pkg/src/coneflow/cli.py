"""Command line entry point: ``coneflow run | sk-study | poisson-study``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from .config import PARSERS, SCENARIOS, ConfigError, RunConfig
from .diagnostics import PotentialMonitor
from .flow import COLUMNS, RunLog, init_flow, run_until
from .geometry import RadialSurface, build_football
from .linalg import ConvergenceError
from .linear_parabolic import LinearProblem, solve_sk_sequence
from .meshio import save_mesh
from .poisson import radial_probe_study
from .verdicts import summarize

log = logging.getLogger("coneflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_BLOWUP = 0, 2, 3, 4


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_timeseries(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in rows:
            w.writerow([fmt(row[c]) for c in COLUMNS])


def write_final_state(path: str, runlog: RunLog, monitor: PotentialMonitor | None) -> None:
    s = runlog.final
    K = s.K
    f = monitor.track.f if monitor is not None else np.full(K.size, math.nan)
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "u", "K", "R", "f"])
        for i in range(K.size):
            w.writerow([i, fmt(s.u[i]), fmt(K[i]), fmt(2.0 * K[i]), fmt(f[i])])


def write_geometry(out_dir: str, surface) -> str:
    """Copy of the mesh; radial surfaces write their warping profile instead."""
    if isinstance(surface, RadialSurface):
        path = os.path.join(out_dir, "profile.csv")
        with open(path, "w", newline="", encoding="ascii") as fh:
            fh.write(f"# radial surface n={surface.n} n_theta={surface.n_theta} orders={list(surface.orders)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rho", "h"])
            rho = surface.rho
            for x, h in zip(rho, surface.profile.h(rho)):
                w.writerow([fmt(x), fmt(h)])
        return path
    path = os.path.join(out_dir, "mesh.conemesh")
    save_mesh(surface, path)
    return path


def run_config(cfg: RunConfig) -> int:
    """Run one configured flow and write its artifacts; returns the exit code."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    surface = cfgmod.build_surface(cfg)
    write_geometry(cfg.output_dir, surface)
    state = init_flow(surface, cfgmod.initial_factor(cfg, surface))
    summary_path = os.path.join(cfg.output_dir, "summary.json")
    try:
        monitor = PotentialMonitor(state)
        runlog = run_until(
            state,
            dt=cfg.dt,
            t_end=cfg.t_end,
            steady_tol=cfg.steady_tol,
            sample_dt=cfg.sample_dt,
            monitor=monitor,
            blowup_threshold=cfg.blowup_threshold,
            renormalize_volume=cfg.renormalize_volume,
        )
    except (ConvergenceError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        with open(summary_path, "w", encoding="ascii") as fh:
            json.dump({"termination": "numerical_failure", "error": str(exc)}, fh, indent=2)
        return EXIT_NUMERICAL
    write_timeseries(os.path.join(cfg.output_dir, "timeseries.csv"), runlog.rows)
    write_final_state(os.path.join(cfg.output_dir, "final_state.csv"), runlog, monitor)
    summary = summarize(runlog, monitor, potential_tol=cfg.potential_tol)
    summary["scenario"] = cfg.scenario
    with open(summary_path, "w", encoding="ascii") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
    log.info("%s: %s at t = %.6g, sup|K| = %.3e", cfg.scenario, runlog.reason, runlog.final.t, runlog.final.sup_abs_K)
    return EXIT_BLOWUP if runlog.reason == "blowup" else EXIT_OK


def _run_safely(cfg: RunConfig) -> int:
    try:
        return run_config(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


def _flag_values(ns: argparse.Namespace) -> dict:
    """Config values given on the command line, parsed like config-file entries."""
    out = {}
    for key, parse in PARSERS.items():
        if key == "scenario" or not hasattr(ns, key):
            continue
        raw = getattr(ns, key)
        text = " ".join(raw) if isinstance(raw, list) else raw
        try:
            out[key] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from None
    return out


def configs_from_args(ns: argparse.Namespace) -> list[RunConfig]:
    flags = _flag_values(ns)
    if ns.config is not None:
        base = cfgmod.load_config(ns.config)
        targets = ns.targets or [None]
    else:
        base = {}
        targets = ns.targets
    if not targets:
        raise ConfigError("give a scenario name or a config file")
    out = []
    for idx, target in enumerate(targets):
        values = dict(base)
        if target is not None:
            if target in SCENARIOS:
                values["scenario"] = target
            elif os.path.isfile(target):
                values.update(cfgmod.load_config(target))
            else:
                raise ConfigError(f"{target!r} is neither a scenario ({', '.join(SCENARIOS)}) nor a config file")
        values.update(flags)
        cfg = cfgmod.resolve(values)
        if len(targets) > 1:
            stem = target if target in SCENARIOS else os.path.splitext(os.path.basename(target))[0]
            cfg = cfgmod.with_overrides(cfg, output_dir=os.path.join(cfg.output_dir, f"{idx:02d}-{stem}"))
        out.append(cfg)
    return out


def cmd_run(ns: argparse.Namespace) -> int:
    try:
        cfgs = configs_from_args(ns)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if ns.jobs > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            codes = list(pool.map(_run_safely, cfgs))
    else:
        codes = [_run_safely(c) for c in cfgs]
    return max(codes)


def cmd_sk_study(ns: argparse.Namespace) -> int:
    try:
        surface = build_football(ns.beta, ns.beta, ns.n)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if ns.k_min > ns.k_max:
        log.error("k-min must not exceed k-max")
        return EXIT_CONFIG
    rho = surface.rho
    u0 = np.exp(-(((rho - 0.5 * rho[-1]) / ns.width) ** 2)) if ns.width > 0 else np.ones_like(rho)
    problem = LinearProblem(a=1.0, b=0.0, f=0.0, u0=u0, T=ns.T)
    try:
        levels = solve_sk_sequence(problem, surface, range(ns.k_min, ns.k_max + 1), ns.dt)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = open(ns.output, "w", newline="", encoding="ascii") if ns.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["k", "sup_diff", "full_diff"])
        for lev in levels:
            w.writerow([lev.k, fmt(lev.sup_diff), fmt(lev.full_diff)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _probe_data(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.cos(theta) * (rho < 1.0) + np.sin(3.0 * rho)


def cmd_poisson_study(ns: argparse.Namespace) -> int:
    try:
        rows = radial_probe_study(ns.beta, _probe_data, ns.radii, n=ns.n, n_theta=ns.n_theta, levels=ns.levels)
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    out = open(ns.output, "w", newline="", encoding="ascii") if ns.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["level", "radius", "sup_grad"])
        for lev, probe in rows:
            w.writerow([lev, 0.0, fmt(probe.tip_value)])
            for s, g in zip(probe.radii, probe.sup_grad):
                w.writerow([lev, fmt(s), fmt(g)])
        maxima = [p.maximum for _, p in rows]
        log.info("probe maxima per level: %s (spread %.3f)", maxima, max(maxima) / min(maxima))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coneflow", description="Normalized Ricci flow on surfaces with cone points.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more flows", argument_default=argparse.SUPPRESS)
    run.add_argument("targets", nargs="*", default=[], help=f"scenario ({', '.join(SCENARIOS)}) or config file")
    run.add_argument("--config", default=None, help="base config file; flags override it")
    run.add_argument("--jobs", type=int, default=1, help="parallel processes for sweeps")
    for key in PARSERS:
        if key == "scenario":
            continue
        flag = "--" + key.replace("_", "-")
        if key == "alpha":
            run.add_argument(flag, dest=key, nargs="+", metavar="A")
        elif key == "renormalize_volume":
            run.add_argument(flag, dest=key, nargs="?", const="true", metavar="BOOL")
        else:
            run.add_argument(flag, dest=key, metavar=key.upper())
    run.set_defaults(func=cmd_run)

    sk = sub.add_parser("sk-study", help="truncated-surface heat problem, k versus sup difference")
    sk.add_argument("--beta", type=float, default=-0.5)
    sk.add_argument("--n", type=int, default=2048)
    sk.add_argument("--k-min", type=int, default=3)
    sk.add_argument("--k-max", type=int, default=8)
    sk.add_argument("--dt", type=float, default=1e-3)
    sk.add_argument("--T", type=float, default=0.025)
    sk.add_argument("--width", type=float, default=0.3, help="bump width of the initial data; 0 gives constant data")
    sk.add_argument("--output", default=None)
    sk.set_defaults(func=cmd_sk_study)

    ps = sub.add_parser("poisson-study", help="gradient probe near a tip across refinements")
    ps.add_argument("--beta", type=float, default=-0.5)
    ps.add_argument("--n", type=int, default=128)
    ps.add_argument("--n-theta", type=int, default=16)
    ps.add_argument("--levels", type=int, nargs="+", default=[1, 2, 4])
    ps.add_argument("--radii", type=float, nargs="+", default=[0.02, 0.04, 0.08, 0.16])
    ps.add_argument("--output", default=None)
    ps.set_defaults(func=cmd_poisson_study)
    return p


def main(argv: list[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
