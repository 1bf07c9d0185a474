"""Invariant verdicts for a finished run."""

from __future__ import annotations

import math

import numpy as np

from .diagnostics import InsufficientHistory, PotentialMonitor, decay_check, fit_log_rate, flat_limit_checks, h_bound
from .flow import RunLog
from .linear_parabolic import verify_max_principle

VERDICT_NAMES = (
    "gauss_bonnet",
    "volume_drift",
    "lower_curvature_barrier",
    "upper_curvature_barrier",
    "energy_boundedness",
    "h_comparison",
    "potential_identity",
    "negativity_preserved",
    "curvature_gap_decay",
    "flat_limit",
    "decay_law",
)


def _v(ok: bool, **detail) -> dict:
    return {"verdict": "pass" if ok else "fail", **detail}


def _na(reason: str) -> dict:
    return {"verdict": "not_applicable", "reason": reason}


def curvature_ode(r: float):
    return lambda h: h * (2.0 * h - r)


def evaluate_run(log: RunLog, monitor: PotentialMonitor | None = None, *, potential_tol: float = 5e-2) -> dict:
    """One entry per name in :data:`VERDICT_NAMES`."""
    s0, s1 = log.initial, log.final
    t = log.times
    chi = s0.chi
    r = s0.r
    out: dict[str, dict] = {}

    gb = np.abs(log.column("gb_residual"))
    tol = 1e-10 * (1.0 + abs(2.0 * math.pi * chi))
    out["gauss_bonnet"] = _v(bool(gb.max() <= tol), max_residual=float(gb.max()), tolerance=tol)

    drift = abs(s1.volume - s0.V0) / s0.V0
    bound = s1.volume_bound / s0.V0
    out["volume_drift"] = _v(drift <= bound * (1 + 1e-9) + 1e-13, relative_drift=drift, a_posteriori_bound=bound)

    F = curvature_ode(r)
    dt_ode = max(float(t[-1]) / 2000.0, 1e-4) if t[-1] > 0 else 1e-4
    lo = verify_max_principle(t, [np.array([x]) for x in log.column("inf_K")], F, float(s0.K.min()), side="lower", rel_tol=1e-2, dt=dt_ode)
    out["lower_curvature_barrier"] = _v(lo.ok, worst_margin=lo.worst_margin, escape_time=lo.escape_time)
    up = verify_max_principle(t, [np.array([x]) for x in log.column("sup_K")], F, float(s0.K.max()), side="upper", rel_tol=1e-2, dt=dt_ode)
    out["upper_curvature_barrier"] = _v(up.ok, worst_margin=up.worst_margin, compared_until=float(up.times[-1]) if up.times.size else 0.0, escape_time=up.escape_time)

    E, EL = log.column("energy_u"), log.column("energy_lap_u")
    cap_u, cap_l = 10.0 * E[0] + 1e-12, 10.0 * EL[0] + 1e-12
    out["energy_boundedness"] = _v(bool(E.max() <= cap_u and EL.max() <= cap_l), max_energy_u=float(E.max()), cap_u=cap_u, max_energy_lap_u=float(EL.max()), cap_lap_u=cap_l)

    if monitor is None:
        for name in ("h_comparison", "potential_identity", "flat_limit", "decay_law"):
            out[name] = _na("potential not tracked")
    else:
        if monitor.h_enabled:
            H = log.column("sup_H")
            margin = float(np.min(h_bound(t, H, r) - H))
            out["h_comparison"] = _v(margin >= 0, worst_margin=margin)
        else:
            out["h_comparison"] = _na("some cone order is >= 0")
        pir = log.column("potential_identity_residual")
        out["potential_identity"] = _v(bool(pir.max() <= potential_tol), max_residual=float(pir.max()), tolerance=potential_tol)
        if abs(r) < 1e-12:
            fl = flat_limit_checks(s1, monitor.track, s0)
            out["flat_limit"] = _v(fl.metric_ratio_residual <= 1e-2, metric_ratio_residual=fl.metric_ratio_residual, final_sup_K=fl.sup_K)
            try:
                d = decay_check(t, log.column("sup_gradf2"))
                out["decay_law"] = _v(d.ok, C=d.C, first_decade_max=d.first_decade_max, last_decade_max=d.last_decade_max)
            except InsufficientHistory as exc:
                out["decay_law"] = _na(str(exc))
        else:
            out["flat_limit"] = _na("r != 0")
            out["decay_law"] = _na("r != 0")

    if s0.K.max() < 0:
        supK = log.column("sup_K")
        out["negativity_preserved"] = _v(bool(supK.max() < 0), max_sup_K=float(supK.max()))
        g = log.column("sup_R_minus_r")
        tail = g[len(g) // 5 :]
        mono = bool(np.all(np.diff(tail) <= 1e-12 * (1.0 + tail[:-1])))
        out["curvature_gap_decay"] = _v(mono, final=float(g[-1]))
    else:
        out["negativity_preserved"] = _na("initial curvature is not negative")
        out["curvature_gap_decay"] = _na("initial curvature is not negative")
    return {name: out[name] for name in VERDICT_NAMES}


def summarize(log: RunLog, monitor: PotentialMonitor | None = None, *, potential_tol: float = 5e-2) -> dict:
    verdicts = evaluate_run(log, monitor, potential_tol=potential_tol)
    fit = fit_log_rate(log.times, log.column("sup_R_minus_r"))
    return {
        "termination": log.reason,
        "claim_scope": log.claim_scope,
        "t_final": log.final.t,
        "steps": log.steps,
        "chi": log.initial.chi,
        "r": log.initial.r,
        "V0": log.initial.V0,
        "final_sup_abs_K": log.final.sup_abs_K,
        "final_sup_R_minus_r": float(np.max(np.abs(log.final.R - log.final.r))),
        "fitted_rates": {
            "sup_R_minus_r": {"rate": fit.rate if fit.valid else None, "r_squared": fit.r_squared},
        },
        "verdicts": verdicts,
    }
