"""Potential function, H-functional, decay law and other monitored quantities."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow import FlowState
from .geometry import Field
from .linear_parabolic import theta_increment
from .poisson import solve_poisson_conformal

log = logging.getLogger(__name__)


@dataclass
class PotentialTrack:
    """Potential ``f`` with ``Lap_g f = R - r``, carried along the flow.

    ``mass_defect`` records, per step, ``sum A e^{2u}(f_new - f_old) - dt r sum A e^{2u} f_new``
    with ``u`` the advanced state; it vanishes up to solver tolerance.
    """

    f: np.ndarray
    f0: np.ndarray
    t: float
    residuals: list[float] = field(default_factory=list)
    mass_defect: list[float] = field(default_factory=list)


def init_potential(state: FlowState) -> PotentialTrack:
    """Solve ``Lap_{g0} f0 = R0 - r``."""
    rhs = state.R - state.r
    w = np.exp(2.0 * state.u) * state.surface.areas
    mass = float(rhs @ w)
    if abs(mass) > 1e-8 * (1.0 + float(np.abs(rhs) @ w)):
        raise ValueError(f"R0 - r has nonzero g0-mean {mass:.3e}; Gauss-Bonnet is violated")
    # remove the roundoff-level mean so the strict solver check sees exact compatibility
    f0 = solve_poisson_conformal(state.surface, state.u, rhs - mass / w.sum()).values
    track = PotentialTrack(f0.copy(), f0.copy(), state.t)
    track.residuals.append(potential_identity_residual(track, state))
    return track


def step_potential(track: PotentialTrack, state: FlowState, dt: float, *, rtol: float = 1e-10) -> PotentialTrack:
    """Backward-Euler step of ``f_t = e^{-2u} Lap f + r f`` using the advanced state ``u``."""
    s = state.surface
    a = np.exp(-2.0 * state.u)
    b = np.full_like(a, state.r)
    d, _ = theta_increment(s.stencil, track.f, a, b, np.zeros_like(a), dt, 1.0, rtol=rtol)
    f_new = track.f + d
    w = np.exp(2.0 * state.u) * s.areas
    track.mass_defect.append(float(d @ w - dt * state.r * (f_new @ w)))
    track.f = f_new
    track.t += dt
    return track


def potential_identity_residual(track: PotentialTrack, state: FlowState) -> float:
    """``sup |e^{-2u} Lap f - (R - r)|`` over all nodes, tips included."""
    lap_f = state.surface.stencil.apply(track.f)
    return float(np.max(np.abs(np.exp(-2.0 * state.u) * lap_f - (state.R - state.r))))


def gradient_sq_flowing(state: FlowState, f: np.ndarray) -> np.ndarray:
    return np.exp(-2.0 * state.u) * state.surface.gradient_sq(f)


def h_functional(track: PotentialTrack, state: FlowState) -> tuple[Field, float]:
    """``H = R - r + |grad f|_g^2`` per node and its supremum."""
    H = state.R - state.r + gradient_sq_flowing(state, track.f)
    return Field(H, "flowing"), float(H.max())


def h_bound(times: np.ndarray, sup_H: np.ndarray, r: float) -> np.ndarray:
    """Comparison bound ``e^{rt} sup H(0) + 1e-2 (1 + |sup H(0)|)``."""
    H0 = float(sup_H[0])
    return np.exp(r * (times - times[0])) * H0 + 1e-2 * (1.0 + abs(H0))


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class DecayReport:
    C: float
    first_decade_max: float
    last_decade_max: float

    @property
    def ok(self) -> bool:
        return self.last_decade_max <= 1.2 * self.first_decade_max


def decay_check(times: Sequence[float], sup_gradf2: Sequence[float]) -> DecayReport:
    """Track ``(1 + t) sup|grad f|^2`` and compare its first and last decades.

    The first decade is ``t <= 10 t1`` (``t1`` the first positive sample time,
    ``t = 0`` included); the last decade is ``[T/10, T]``. Needs ``T >= 100 t1``.
    """
    t = np.asarray(times, dtype=float)
    g = np.asarray(sup_gradf2, dtype=float)
    pos = t[t > 0]
    if pos.size < 2 or t.max() < 100.0 * pos.min():
        raise InsufficientHistory("decay check needs at least two decades of sample times")
    c = (1.0 + t) * g
    T = t.max()
    first = c[t <= 10.0 * pos.min()]
    last = c[t >= T / 10.0]
    return DecayReport(float(c.max()), float(first.max()), float(last.max()))


def interior_mask(surface) -> np.ndarray:
    """Nodes that are neither cone points nor their stencil neighbours."""
    cone = surface.cone_mask
    st = surface.stencil
    near = cone.copy()
    near[st.j[cone[st.i]]] = True
    near[st.i[cone[st.j]]] = True
    return ~near


def curvature_evolution_residual(prev: FlowState, new: FlowState) -> float:
    """``sup |dR/dt - (e^{-2u} Lap R + R (R - r))|`` away from tips.

    ``dR/dt`` is the difference quotient between two states; the right side is
    averaged over both ends. The identity holds exactly for the
    time-continuous discrete flow, so the residual measures time error only.
    """
    dt = new.t - prev.t
    if dt <= 0:
        raise ValueError("states must be in increasing time order")
    st = new.surface.stencil

    def rhs(s: FlowState) -> np.ndarray:
        R = s.R
        return np.exp(-2.0 * s.u) * st.apply(R) + R * (R - s.r)

    dq = (new.R - prev.R) / dt
    res = np.abs(dq - 0.5 * (rhs(prev) + rhs(new)))
    return float(res[interior_mask(new.surface)].max())


@dataclass(frozen=True)
class FlatLimitReport:
    metric_ratio_residual: float
    sup_u: float
    sup_u0: float
    sup_K: float
    sup_K0: float
    energy_u: float
    energy_u0: float


def flat_limit_checks(state: FlowState, track: PotentialTrack, initial: FlowState) -> FlatLimitReport:
    """For ``r = 0``: ``sup |2u(t) - 2u(0) - f0 + f(t)|`` and the uniform-bound trio."""
    if abs(state.r) > 1e-12:
        raise ValueError("flat-limit checks need r = 0")
    st = state.surface.stencil
    resid = float(np.max(np.abs(2.0 * state.u - 2.0 * initial.u - track.f0 + track.f)))
    return FlatLimitReport(
        resid,
        float(np.max(np.abs(state.u))),
        float(np.max(np.abs(initial.u))),
        state.sup_abs_K,
        initial.sup_abs_K,
        st.energy(state.u),
        st.energy(initial.u),
    )


@dataclass(frozen=True)
class RateFit:
    rate: float
    r_squared: float

    @property
    def valid(self) -> bool:
        return self.r_squared >= 0.99


def fit_log_rate(times: Sequence[float], values: Sequence[float]) -> RateFit:
    """Least-squares slope of ``log values`` against ``t`` over the final half of the samples."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = t >= 0.5 * (t[0] + t[-1])
    t, v = t[keep], v[keep]
    if t.size < 3 or np.any(v <= 0):
        return RateFit(math.nan, 0.0)
    y = np.log(v)
    A = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return RateFit(float(coef[0]), r2)


class PotentialMonitor:
    """Steps the potential with the flow and adds its columns to each sample.

    With ``track_curvature`` set, the curvature-evolution residual of every
    step is kept in ``curvature_residuals``.
    """

    def __init__(self, state: FlowState, *, track_curvature: bool = False):
        self.track = init_potential(state)
        self.h_enabled = state.surface.divisor.all_sharp
        if not self.h_enabled:
            log.warning("H comparison disabled: a cone order is >= 0")
        self.track_curvature = track_curvature
        self.curvature_residuals: list[float] = []

    def on_step(self, prev: FlowState, new: FlowState) -> None:
        step_potential(self.track, new, new.dt_used)
        if self.track_curvature:
            self.curvature_residuals.append(curvature_evolution_residual(prev, new))

    def sample(self, state: FlowState) -> dict:
        g2 = gradient_sq_flowing(state, self.track.f)
        H = state.R - state.r + g2
        res = potential_identity_residual(self.track, state)
        self.track.residuals.append(res)
        return {
            "sup_H": float(H.max()),
            "sup_gradf2": float(g2.max()),
            "potential_identity_residual": res,
        }
