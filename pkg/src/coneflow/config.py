"""Flat ``key = value`` run configuration and scenario assembly."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from typing import Any

import numpy as np

from . import presets
from .meshio import load_mesh

SCENARIOS = ("pillowcase", "hyperbolic-triangle", "football", "mesh")


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.line = line


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _divisor(text: str) -> tuple[tuple[int, float], ...]:
    out = []
    for item in text.replace(",", " ").split():
        node, _, beta = item.partition(":")
        if not beta:
            raise ValueError(f"divisor entries look like vertex:beta, got {item!r}")
        out.append((int(node), float(beta)))
    return tuple(out)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "pillowcase"
    mesh: str | None = None
    genus: int | None = None
    divisor: tuple[tuple[int, float], ...] | None = None
    alpha: tuple[float, ...] = (0.25, 0.25, 0.25)
    beta1: float = -0.5
    beta2: float = -0.5
    side: float = 2.0
    resolution: int | None = None
    dt: float | None = None
    t_end: float | None = None
    sample_dt: float | None = None
    steady_tol: float | None = None
    k_trunc: int | None = None
    blowup_threshold: float | None = None
    amplitude: float | None = None
    seed: int | None = None
    initial: str | None = None
    renormalize_volume: bool = False
    potential_tol: float = 5e-2
    output_dir: str = "run"


PARSERS = {
    "scenario": str,
    "mesh": str,
    "genus": int,
    "divisor": _divisor,
    "alpha": _floats,
    "beta1": float,
    "beta2": float,
    "side": float,
    "resolution": int,
    "dt": float,
    "t_end": _opt_float,
    "sample_dt": _opt_float,
    "steady_tol": _opt_float,
    "k_trunc": int,
    "blowup_threshold": _opt_float,
    "amplitude": float,
    "seed": int,
    "initial": str,
    "renormalize_volume": _bool,
    "potential_tol": float,
    "output_dir": str,
}

# resolution, dt, t_end, sample_dt, steady_tol, amplitude, seed, initial
DEFAULTS: dict[str, dict[str, Any]] = {
    "pillowcase": dict(resolution=20, dt=1e-3, t_end=50.0, sample_dt=0.01, steady_tol=None, amplitude=0.3, seed=7, initial="perturbation"),
    "hyperbolic-triangle": dict(resolution=24, dt=1e-2, t_end=200.0, sample_dt=0.05, steady_tol=1e-8, amplitude=0.05, seed=11, initial="uniformizer"),
    "football": dict(resolution=256, dt=1e-3, t_end=5.0, sample_dt=0.01, steady_tol=1e-8, amplitude=0.1, seed=3, initial="perturbation"),
    "mesh": dict(resolution=None, dt=1e-3, t_end=1.0, sample_dt=0.01, steady_tol=1e-8, amplitude=0.0, seed=0, initial="perturbation"),
}


def parse_config(text: str, path: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines into a dict of typed values."""
    out: dict[str, Any] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"expected 'key = value', got {line!r}", path, no)
        if key not in PARSERS:
            raise ConfigError(f"unknown key {key!r}", path, no)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", path, no)
        try:
            out[key] = PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", path, no) from None
    return out


def load_config(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def resolve(values: dict[str, Any]) -> RunConfig:
    """Fill scenario defaults and validate."""
    scenario = values.get("scenario", "pillowcase")
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    merged = dict(DEFAULTS[scenario])
    merged.update(values)
    merged["scenario"] = scenario
    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(**{k: v for k, v in merged.items() if k in known})
    if cfg.dt is None or cfg.dt <= 0:
        raise ConfigError("dt must be positive")
    if cfg.t_end is None and cfg.steady_tol is None:
        raise ConfigError("set t_end or steady_tol, otherwise the run never stops")
    if cfg.t_end is not None and cfg.t_end <= 0:
        raise ConfigError("t_end must be positive")
    if cfg.amplitude is not None and cfg.amplitude < 0:
        raise ConfigError("amplitude must be nonnegative")
    if cfg.initial not in ("perturbation", "uniformizer", "zero"):
        raise ConfigError(f"initial must be perturbation, uniformizer or zero, got {cfg.initial!r}")
    if scenario == "mesh" and not cfg.mesh:
        raise ConfigError("scenario 'mesh' needs a mesh path")
    if scenario == "hyperbolic-triangle" and len(cfg.alpha) != 3:
        raise ConfigError("hyperbolic-triangle needs three angles")
    return cfg


def build_surface(cfg: RunConfig):
    try:
        if cfg.scenario == "pillowcase":
            surface = presets.pillowcase(cfg.resolution, cfg.side)
        elif cfg.scenario == "hyperbolic-triangle":
            surface = presets.hyperbolic_triangle(cfg.alpha, cfg.resolution)
        elif cfg.scenario == "football":
            surface = presets.football(cfg.beta1, cfg.beta2, cfg.resolution)
        else:
            surface = load_mesh(cfg.mesh)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"cannot build surface: {exc}") from None
    if cfg.genus is not None and cfg.genus != surface.genus:
        raise ConfigError(f"genus {cfg.genus} does not match the surface (genus {surface.genus})")
    if cfg.divisor is not None:
        given = dict(cfg.divisor)
        actual = dict(zip(surface.divisor.points, surface.divisor.orders))
        if given.keys() != actual.keys() or any(abs(given[p] - actual[p]) > 1e-12 for p in given):
            raise ConfigError(f"divisor {cfg.divisor} does not match the surface divisor {tuple(actual.items())}")
    return surface


def initial_factor(cfg: RunConfig, surface) -> np.ndarray:
    """Initial conformal factor; volume is matched to the background area."""
    base = presets.linearized_uniformizer(surface) if cfg.initial == "uniformizer" else np.zeros(surface.n_nodes)
    if cfg.initial == "zero" or not cfg.amplitude:
        u = base
    else:
        u = base + presets.smooth_perturbation(surface, cfg.amplitude, cfg.seed, match_volume=False)
    A = surface.areas
    return u - 0.5 * math.log((np.exp(2.0 * u) @ A) / A.sum())


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
