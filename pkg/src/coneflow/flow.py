"""Normalized Ricci flow in conformal gauge.

The flowing metric is ``g = e^{2u} g_bg`` and ``u`` evolves by::

    u_t = e^{-2u} Lap u + r/2 - e^{-2u} K_bg = r/2 - K

with ``K = e^{-2u}(-Lap u + K_bg)`` and ``r = 4 pi chi / V0`` fixed at the start.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Protocol

import numpy as np

from .geometry import Field, check_finite
from .linear_parabolic import theta_increment

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class FlowBlowup(ArithmeticError):
    """``sup |K|`` passed the blowup threshold."""

    def __init__(self, state: "FlowState", threshold: float):
        super().__init__(f"sup|K| = {state.sup_abs_K:.3e} exceeds {threshold:.3e} at t = {state.t:.6g}")
        self.state = state
        self.threshold = threshold


class PicardDivergence(ArithmeticError):
    def __init__(self, gaps: list[float]):
        super().__init__(f"Picard iterates stopped contracting: gaps {gaps[-4:]}")
        self.gaps = gaps


@dataclass(frozen=True, eq=False)
class FlowState:
    surface: object
    u: np.ndarray
    t: float
    r: float
    V0: float
    dt_used: float = 0.0
    sup_dudt: float = math.nan
    cg_iterations: int = 0
    volume_bound: float = 0.0

    @cached_property
    def lap_u(self) -> np.ndarray:
        return self.surface.stencil.apply(self.u)

    @cached_property
    def K(self) -> np.ndarray:
        return np.exp(-2.0 * self.u) * (-self.lap_u + self.surface.K_bg)

    @property
    def R(self) -> np.ndarray:
        return 2.0 * self.K

    @property
    def sup_abs_K(self) -> float:
        return float(np.max(np.abs(self.K)))

    @cached_property
    def volume(self) -> float:
        return float(np.exp(2.0 * self.u) @ self.surface.areas)

    @property
    def chi(self) -> float:
        return self.surface.euler_number

    @property
    def gauss_bonnet_residual(self) -> float:
        total = float((self.K * np.exp(2.0 * self.u)) @ self.surface.areas)
        return total - TWO_PI * self.chi

    def with_u(self, u: np.ndarray, t: float, **kw) -> "FlowState":
        return replace(self, u=u, t=t, **kw)


@dataclass(frozen=True)
class InitDiagnostics:
    sup_u: float
    sup_K: float
    energy_u: float
    energy_K: float
    sup_lap_K: float


def init_flow(surface, u0) -> FlowState:
    u0 = check_finite(u0.values if isinstance(u0, Field) else u0, "u0")
    if u0.size != surface.n_nodes:
        raise ValueError("u0 must have one value per node")
    V0 = float(np.exp(2.0 * u0) @ surface.areas)
    r = 4.0 * math.pi * surface.euler_number / V0
    return FlowState(surface, u0, 0.0, r, V0)


def init_diagnostics(state: FlowState) -> InitDiagnostics:
    st = state.surface.stencil
    K = state.K
    return InitDiagnostics(
        sup_u=float(np.max(np.abs(state.u))),
        sup_K=state.sup_abs_K,
        energy_u=st.energy(state.u),
        energy_K=st.energy(K),
        sup_lap_K=float(np.max(np.abs(st.apply(K)))),
    )


def curvature(state: FlowState) -> Field:
    """Gauss curvature ``e^{-2u}(-Lap u + K_bg)``."""
    return Field(state.K, "flowing")


def scalar_curvature(state: FlowState) -> Field:
    """Scalar curvature ``R = 2K``."""
    return Field(state.R, "flowing")


def default_blowup_threshold(r: float) -> float:
    return 1e6 * abs(r) + 1e6


def _increment(state: FlowState, dt: float, rtol: float) -> tuple[np.ndarray, int]:
    s = state.surface
    a = np.exp(-2.0 * state.u)
    f = 0.5 * state.r - a * s.K_bg
    d, info = theta_increment(s.stencil, state.u, a, np.zeros_like(a), f, dt, 1.0, rtol=rtol)
    return d, info.iterations


def flow_step(
    state: FlowState,
    dt: float,
    *,
    max_increment: float = 0.1,
    min_dt: float = 1e-12,
    blowup_threshold: float | None = None,
    renormalize_volume: bool = False,
    rtol: float = 1e-10,
) -> FlowState:
    """One semi-implicit step; ``dt`` is halved until ``sup|u_new - u| <= max_increment``.

    The returned state records the step actually taken in ``dt_used``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = dt
    while True:
        d, its = _increment(state, h, rtol)
        big = float(np.max(np.abs(d)))
        if big <= max_increment or h <= min_dt:
            break
        h *= 0.5
    u = state.u + d
    if not np.all(np.isfinite(u)):
        raise FloatingPointError(f"non-finite conformal factor at t = {state.t + h}")
    # V_new - V = sum A e^{2u}(e^{2d} - 1 - 2d) + sum A e^{2u} 2d; the first sum is O(d^2)
    w = np.exp(2.0 * state.u) * state.surface.areas
    bound = state.volume_bound + 2.0 * math.exp(2.0 * big) * big**2 * state.volume + abs(2.0 * float(w @ d))
    if renormalize_volume:
        V = float(np.exp(2.0 * u) @ state.surface.areas)
        u = u - 0.5 * math.log(V / state.V0)
        bound = 0.0
    new = state.with_u(u, state.t + h, dt_used=h, sup_dudt=big / h, cg_iterations=its, volume_bound=bound)
    limit = default_blowup_threshold(state.r) if blowup_threshold is None else blowup_threshold
    if new.sup_abs_K > limit:
        raise FlowBlowup(new, limit)
    return new


class Monitor(Protocol):
    def on_step(self, prev: FlowState, new: FlowState) -> None: ...

    def sample(self, state: FlowState) -> dict: ...


COLUMNS = (
    "t",
    "volume",
    "gb_residual",
    "sup_K",
    "inf_K",
    "sup_R_minus_r",
    "sup_H",
    "sup_gradf2",
    "energy_u",
    "energy_lap_u",
    "sup_dudt",
    "potential_identity_residual",
    "dt_used",
)


def sample_row(state: FlowState, monitor: Monitor | None = None) -> dict:
    st = state.surface.stencil
    K = state.K
    row = {
        "t": state.t,
        "volume": state.volume,
        "gb_residual": state.gauss_bonnet_residual,
        "sup_K": float(K.max()),
        "inf_K": float(K.min()),
        "sup_R_minus_r": float(np.max(np.abs(2.0 * K - state.r))),
        "sup_H": math.nan,
        "sup_gradf2": math.nan,
        "energy_u": st.energy(state.u),
        "energy_lap_u": st.energy(state.lap_u),
        # at t = 0 use the exact rate u_t = r/2 - K
        "sup_dudt": state.sup_dudt if state.dt_used > 0 else float(np.max(np.abs(0.5 * state.r - K))),
        "potential_identity_residual": math.nan,
        "dt_used": state.dt_used,
    }
    if monitor is not None:
        row.update(monitor.sample(state))
    return row


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    reason: str = "running"
    final: FlowState | None = None
    initial: FlowState | None = None
    states: list[np.ndarray] = field(default_factory=list)
    claim_scope: str = ""
    steps: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return self.column("t")


def claim_scope(chi: float) -> str:
    if chi > 1e-12:
        return "no convergence claim (chi > 0)"
    if chi < -1e-12:
        return "converges to constant curvature (chi < 0)"
    return "converges to a flat cone metric (chi = 0)"


def advance(
    state: FlowState,
    t_target: float,
    dt: float,
    *,
    monitor: Monitor | None = None,
    **step_kw,
) -> tuple[FlowState, int]:
    """Step until ``t_target`` is hit exactly; returns the state and the step count."""
    steps = 0
    while state.t < t_target - 1e-12 * max(1.0, abs(t_target)):
        h = min(dt, t_target - state.t)
        # absorb a sliver so the target is not overshot by rounding
        if t_target - (state.t + h) < 1e-9 * dt:
            h = t_target - state.t
        new = flow_step(state, h, **step_kw)
        if monitor is not None:
            monitor.on_step(state, new)
        state = new
        steps += 1
    return state, steps


def run_until(
    state: FlowState,
    *,
    dt: float,
    t_end: float | None = None,
    steady_tol: float | None = 1e-8,
    sample_dt: float | None = None,
    monitor: Monitor | None = None,
    record_states: bool = False,
    max_steps: int | None = None,
    blowup_threshold: float | None = None,
    renormalize_volume: bool = False,
    on_sample: Callable[[FlowState, dict], None] | None = None,
) -> RunLog:
    """Advance the flow, sampling diagnostics every ``sample_dt`` (default: every step).

    Terminates at ``t_end``, when ``sup|u_t| < steady_tol`` (if given), on
    blowup, or after ``max_steps``. The reason is stored in ``RunLog.reason``.
    """
    if t_end is None and steady_tol is None and max_steps is None:
        raise ValueError("run needs t_end, steady_tol or max_steps")
    sample_dt = dt if sample_dt is None else sample_dt
    logrun = RunLog(initial=state, claim_scope=claim_scope(state.chi))
    step_kw = {"blowup_threshold": blowup_threshold, "renormalize_volume": renormalize_volume}

    def record(s: FlowState):
        row = sample_row(s, monitor)
        logrun.rows.append(row)
        if record_states:
            logrun.states.append(s.u.copy())
        if on_sample is not None:
            on_sample(s, row)
        return row

    record(state)
    k = 0
    while True:
        if steady_tol is not None and logrun.rows[-1]["sup_dudt"] < steady_tol:
            logrun.reason = "steady"
            break
        if t_end is not None and state.t >= t_end - 1e-12 * max(1.0, t_end):
            logrun.reason = "t_end"
            break
        if max_steps is not None and logrun.steps >= max_steps:
            logrun.reason = "max_steps"
            break
        k += 1
        target = k * sample_dt
        if t_end is not None:
            target = min(target, t_end)
        try:
            state, n = advance(state, target, dt, monitor=monitor, **step_kw)
        except FlowBlowup as exc:
            state = exc.state
            logrun.reason = "blowup"
            record(state)
            break
        logrun.steps += n
        record(state)
    logrun.final = state
    return logrun


@dataclass(frozen=True)
class PicardResult:
    times: np.ndarray
    trajectory: np.ndarray
    gaps: list[float]

    @property
    def ratios(self) -> np.ndarray:
        g = np.asarray(self.gaps)
        return g[1:] / g[:-1]


def picard_local_solve(
    state: FlowState,
    T: float,
    dt: float,
    *,
    max_iters: int = 60,
    tol: float = 1e-8,
    rtol: float = 1e-12,
) -> PicardResult:
    """Picard iteration on ``[t0, t0 + T]``.

    Iterate ``i`` solves the linear equation whose coefficient ``e^{-2u}`` is
    frozen from iterate ``i-1`` (the zeroth iterate is constant in time).
    Each iterate is marched with backward Euler on the same time grid, so the
    fixed point is the fully implicit discretization of the flow.
    Raises :class:`PicardDivergence` when the gap ratio is at least 1 three
    times in a row.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    s = state.surface
    st = s.stencil
    n = max(1, math.ceil(T / dt - 1e-9))
    h = T / n
    times = state.t + h * np.arange(n + 1)
    prev = np.repeat(state.u[None, :], n + 1, axis=0)
    gaps: list[float] = []
    growing = 0
    zeros = np.zeros(s.n_nodes)
    for _ in range(max_iters):
        cur = np.empty_like(prev)
        cur[0] = state.u
        for k in range(n):
            a = np.exp(-2.0 * prev[k + 1])
            f = 0.5 * state.r - a * s.K_bg
            d, _ = theta_increment(st, cur[k], a, zeros, f, h, 1.0, rtol=rtol)
            cur[k + 1] = cur[k] + d
        gap = float(np.max(np.abs(cur - prev)))
        gaps.append(gap)
        prev = cur
        if gap < tol:
            return PicardResult(times, cur, gaps)
        if len(gaps) >= 2 and gaps[-1] >= gaps[-2]:
            growing += 1
            if growing >= 3:
                raise PicardDivergence(gaps)
        else:
            growing = 0
    raise PicardDivergence(gaps)


def picard_existence_time(
    state: FlowState,
    T_max: float,
    dt: float,
    *,
    bisections: int = 6,
    max_iters: int = 40,
    min_steps: int = 4,
    min_fraction: float = 1e-6,
) -> tuple[float, PicardResult]:
    """Largest tested ``T <= T_max`` on which the Picard iteration converges.

    Halves ``T`` until it converges, then bisects between the last success
    and failure. Each window uses at least ``min_steps`` time steps, so short
    windows also get short steps; the lagged coefficient of a single long
    step can fail to contract on its own.
    """

    def attempt(T: float) -> PicardResult:
        return picard_local_solve(state, T, min(dt, T / min_steps), max_iters=max_iters)

    T = T_max
    good = None
    bad = None
    while good is None:
        try:
            good = (T, attempt(T))
        except PicardDivergence:
            bad = T
            T *= 0.5
            if T < min_fraction * T_max:
                raise
    if bad is None:
        return good
    lo, hi = good[0], bad
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        try:
            good = (mid, attempt(mid))
            lo = mid
        except PicardDivergence:
            hi = mid
    return good


def trajectory(state: FlowState, T: float, dt: float, sample_dt: float, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Sampled conformal factors on ``[t0, t0 + T]``; rows are samples."""
    n = max(1, round(T / sample_dt))
    times = [state.t]
    us = [state.u.copy()]
    t0 = state.t
    for k in range(1, n + 1):
        state, _ = advance(state, t0 + k * T / n, dt, **kw)
        times.append(state.t)
        us.append(state.u.copy())
    return np.array(times), np.array(us)


def uniqueness_probe(surface, u0, dt1: float, dt2: float, T: float, *, sample_dt: float | None = None) -> float:
    """``sup_t sup_x |u^{dt1} - u^{dt2}|`` over common sample times."""
    if not math.isclose(dt2, 0.5 * dt1, rel_tol=1e-12):
        raise ValueError("dt2 must equal dt1 / 2")
    sample_dt = dt1 if sample_dt is None else sample_dt
    s0 = init_flow(surface, u0)
    _, a = trajectory(s0, T, dt1, sample_dt)
    _, b = trajectory(s0, T, dt2, sample_dt)
    return float(np.max(np.abs(a - b)))
