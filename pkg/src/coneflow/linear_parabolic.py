"""Linear parabolic equations ``u_t = a Lap u + b u + f`` and comparison tools."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .geometry import Field, check_finite
from .linalg import SolveInfo, pcg
from .operators import LaplacianStencil, Truncation, truncate

Coefficient = Union[float, np.ndarray, Callable[[float], np.ndarray]]

SCHEMES = {"implicit": 1.0, "crank_nicolson": 0.5}


def _eval(c: Coefficient, t: float, n: int, mask: np.ndarray | None = None) -> np.ndarray:
    v = c(t) if callable(c) else c
    v = np.broadcast_to(np.asarray(v, dtype=float), (mask.size if mask is not None else n,))
    if mask is not None:
        v = v[mask]
    return np.array(v)


@dataclass
class LinearProblem:
    """``u_t = a Lap u + b u + f`` with node-valued coefficients.

    Each coefficient is a scalar, an array over nodes, or a callable of time
    returning such an array. ``a_min`` is the declared lower bound ``a >= c > 0``.
    """

    a: Coefficient
    b: Coefficient
    f: Coefficient
    u0: np.ndarray
    T: float
    a_min: float = 0.0

    def __post_init__(self):
        self.u0 = check_finite(self.u0, "u0")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")

    def coefficients(self, t: float, mask: np.ndarray | None = None):
        n = self.u0.size
        a = _eval(self.a, t, n, mask)
        if np.any(a <= self.a_min) or np.any(a <= 0):
            raise ValueError(f"coefficient a drops to {a.min():.3e}, below its declared bound {self.a_min}")
        return a, _eval(self.b, t, n, mask), _eval(self.f, t, n, mask)


def theta_increment(
    stencil: LaplacianStencil,
    u: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    f: np.ndarray,
    dt: float,
    theta: float = 1.0,
    *,
    rtol: float = 1e-10,
) -> tuple[np.ndarray, SolveInfo]:
    """Increment ``d = u_new - u`` of one theta step.

    Solves ``(I - theta dt (a Lap + b)) d = dt ((a Lap + b) u + f)``, scaled by
    ``A / a`` into a symmetric positive definite system.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    scale = stencil.areas / a
    diag_part = scale * (1.0 - theta * dt * b)
    if np.any(diag_part <= 0):
        raise ValueError("theta*dt*b >= 1 somewhere: step too large for the reaction term")
    L = stencil.stiffness
    rhs = dt * (L @ u + scale * (b * u + f))
    c = theta * dt

    def matvec(x):
        return diag_part * x - c * (L @ x)

    return pcg(matvec, rhs, diag_part + c * stencil.degree, rtol=rtol)


def step_linear(
    u,
    problem: LinearProblem,
    t: float,
    dt: float,
    scheme: str = "implicit",
    *,
    stencil: LaplacianStencil,
    mask: np.ndarray | None = None,
) -> Field:
    """One backward-Euler or Crank-Nicolson step from ``t`` to ``t + dt``.

    Coefficients are taken at ``t + dt`` (implicit) or ``t + dt/2``
    (Crank-Nicolson). ``mask`` restricts full-surface coefficients to the
    nodes of a truncated stencil.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    theta = SCHEMES[scheme]
    u = check_finite(u.values if isinstance(u, Field) else u, "u")
    t_eval = t + dt if theta == 1.0 else t + 0.5 * dt
    a, b, f = problem.coefficients(t_eval, mask)
    d, _ = theta_increment(stencil, u, a, b, f, dt, theta)
    return Field(u + d)


def solve_linear(
    problem: LinearProblem,
    stencil: LaplacianStencil,
    dt: float,
    scheme: str = "implicit",
    *,
    mask: np.ndarray | None = None,
    record: bool = False,
):
    """March from 0 to ``problem.T``; the last step is shortened to land on ``T``.

    Returns the final field, or ``(times, states)`` when ``record`` is set.
    """
    u = problem.u0 if mask is None else problem.u0[mask]
    t = 0.0
    times, states = [0.0], [u.copy()]
    n_steps = max(1, math.ceil(problem.T / dt - 1e-9))
    for k in range(n_steps):
        h = min(dt, problem.T - t) if k == n_steps - 1 else dt
        u = step_linear(u, problem, t, h, scheme, stencil=stencil, mask=mask).values
        t = problem.T if k == n_steps - 1 else t + h
        if record:
            times.append(t)
            states.append(u.copy())
    if record:
        return np.array(times), np.array(states)
    return u


@dataclass(frozen=True)
class SkLevel:
    k: int
    truncation: Truncation
    solution: np.ndarray
    sup_diff: float
    full_diff: float


def solve_sk_sequence(
    problem: LinearProblem,
    surface,
    k_range: Sequence[int],
    dt: float,
    scheme: str = "implicit",
) -> list[SkLevel]:
    """Solve on each ``S_k`` and on the full surface up to ``problem.T``.

    ``sup_diff`` of level ``k`` is ``sup over S_{k-1}`` of ``|u_k - u_{k-1}|``
    (NaN for the first level); ``full_diff`` is ``sup over S_k |u_k - u_full|``.
    """
    ks = list(k_range)
    truncs = [truncate(surface, k) for k in ks]
    u_full = solve_linear(problem, surface.stencil, dt, scheme)
    out: list[SkLevel] = []
    prev = None
    for k, tr in zip(ks, truncs):
        sol = np.full(surface.n_nodes, np.nan)
        sol[tr.active] = solve_linear(problem, tr.stencil, dt, scheme, mask=tr.active)
        if prev is None:
            sup_diff = math.nan
        else:
            common = prev.truncation.active
            sup_diff = float(np.max(np.abs(sol[common] - prev.solution[common])))
        full_diff = float(np.max(np.abs(sol[tr.active] - u_full[tr.active])))
        prev = SkLevel(k, tr, sol, sup_diff, full_diff)
        out.append(prev)
    return out


class OdeEscape(ArithmeticError):
    """The comparison ODE left every bounded set before the requested time."""

    def __init__(self, escape_time: float, times: np.ndarray, values: np.ndarray):
        super().__init__(f"ODE solution escapes to infinity near t = {escape_time:.10g}")
        self.escape_time = escape_time
        self.times = times
        self.values = values


@dataclass(frozen=True)
class OdeSolution:
    times: np.ndarray
    values: np.ndarray
    dt: float
    error_estimate: float


def _rk4_segment(F, h0: float, t_span: float, n: int, limit: float) -> tuple[float, float | None]:
    h = h0
    step = t_span / n
    for i in range(n):
        k1 = F(h)
        k2 = F(h + 0.5 * step * k1)
        k3 = F(h + 0.5 * step * k2)
        k4 = F(h + step * k3)
        h = h + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(h) or abs(h) > limit:
            return h, (i + 1) * step
    return h, None


def ode_comparison(
    F: Callable[[float], float],
    C0: float,
    T: float,
    dt: float,
    *,
    t_eval: Sequence[float] | None = None,
    rtol: float = 1e-8,
    escape_limit: float = 1e12,
    max_halvings: int = 30,
) -> OdeSolution:
    """RK4 for ``h' = F(h)``, ``h(0) = C0``, sampled at ``t_eval`` (default: the dt grid).

    The step is halved until a step-halving estimate of the relative error is
    below ``rtol``. Raises :class:`OdeEscape` if ``|h|`` passes
    ``escape_limit`` before ``T``; the escape time is refined to about 1e-4 relative.
    """
    if T < 0 or dt <= 0:
        raise ValueError("need T >= 0 and dt > 0")
    if t_eval is None:
        n = max(1, math.ceil(T / dt - 1e-9))
        t_eval = np.linspace(0.0, T, n + 1)
    times = np.asarray(t_eval, dtype=float)
    if times.size == 0 or np.any(np.diff(times) < 0) or times[0] < 0 or times[-1] > T * (1 + 1e-12) + 1e-15:
        raise ValueError("t_eval must be sorted and lie in [0, T]")

    def integrate(step: float):
        vals = np.empty(times.size)
        h, t = float(C0), 0.0
        for idx, te in enumerate(times):
            span = te - t
            if span > 0:
                n = max(1, math.ceil(span / step - 1e-9))
                h, esc = _rk4_segment(F, h, span, n, escape_limit)
                if esc is not None:
                    return vals[:idx], t + esc
            vals[idx] = h
            t = te
        return vals, None

    step = dt
    coarse, esc = integrate(step)
    for _ in range(max_halvings):
        fine, esc_f = integrate(step / 2)
        if esc is not None or esc_f is not None:
            if esc is not None and esc_f is not None and abs(esc - esc_f) <= max(1e-4 * esc_f, 1e-12):
                k = min(coarse.size, fine.size)
                raise OdeEscape(esc_f, times[:k], fine[:k])
            coarse, esc, step = fine, esc_f, step / 2
            continue
        err = float(np.max(np.abs(fine - coarse) / (1.0 + np.abs(fine)))) if fine.size else 0.0
        # Richardson: the fine solution's own error is about err / 15
        if err / 15.0 <= rtol:
            return OdeSolution(times, fine, step / 2, err / 15.0)
        coarse, step = fine, step / 2
    raise ArithmeticError("ODE step halving did not reach the requested tolerance")


@dataclass(frozen=True)
class MaxPrincipleReport:
    times: np.ndarray
    barrier: np.ndarray
    extreme: np.ndarray
    margin: np.ndarray
    tolerance: np.ndarray
    side: str
    escape_time: float | None = None

    @property
    def violations(self) -> np.ndarray:
        return np.flatnonzero(self.margin < -self.tolerance)

    @property
    def ok(self) -> bool:
        return self.violations.size == 0

    @property
    def worst_margin(self) -> float:
        return float(np.min(self.margin)) if self.margin.size else math.inf


def verify_max_principle(
    times: Sequence[float],
    u_series: Sequence[np.ndarray],
    F: Callable[[float], float],
    C0: float,
    *,
    side: str = "upper",
    rel_tol: float = 1e-6,
    dt: float | None = None,
) -> MaxPrincipleReport:
    """Compare ``max u(t)`` with ``h(t)`` (``side="upper"``) or ``min u(t)`` with ``h(t)`` (``"lower"``).

    The margin is ``h - max u`` or ``min u - h``; a sample violates the
    principle when the margin is below ``-rel_tol * (1 + |h|)``. If the ODE
    escapes, only samples before the escape are compared.
    """
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    times = np.asarray(times, dtype=float)
    T = float(times[-1]) if times.size else 0.0
    step = dt if dt is not None else max(T / 1000.0, 1e-4)
    escape = None
    try:
        sol = ode_comparison(F, C0, T, step, t_eval=times)
        h = sol.values
    except OdeEscape as exc:
        escape = exc.escape_time
        keep = times < escape
        sub = ode_comparison(F, C0, float(times[keep][-1]) if keep.any() else 0.0, step, t_eval=times[keep]) if keep.any() else None
        h = sub.values if sub is not None else np.empty(0)
        times = times[keep]
    series = [np.asarray(u) for u in u_series][: times.size]
    if side == "upper":
        ext = np.array([u.max() for u in series])
        margin = h - ext
    else:
        ext = np.array([u.min() for u in series])
        margin = ext - h
    return MaxPrincipleReport(times, h, ext, margin, rel_tol * (1.0 + np.abs(h)), side, escape)


@dataclass(frozen=True)
class DriftReport:
    times: np.ndarray
    drift: np.ndarray
    bound: np.ndarray
    C1: float
    C2: float

    @property
    def ok(self) -> bool:
        return bool(np.all(self.drift <= self.bound * (1 + 1e-9) + 1e-12))


def c0_drift_bound(
    times: Sequence[float],
    u_series: Sequence[np.ndarray],
    problem: LinearProblem,
    stencil: LaplacianStencil,
    *,
    dt: float | None = None,
) -> DriftReport:
    """Check ``||u(t) - u0|| <= e^{C1 t} int_0^t e^{-C1 s} C2 ds``.

    ``C1 = sup|b|`` and ``C2 = sup|f + b u0 + a Lap u0|`` over the sample
    times. With ``dt`` given, the bound is the backward-Euler version of the
    same integral, ``B_{n+1} = (B_n + dt C2) / (1 - dt C1)``, which converges to
    the continuum formula and is what the discrete scheme actually satisfies.
    """
    times = np.asarray(times, dtype=float)
    u0 = problem.u0
    lap_u0 = stencil.apply(u0)
    C1 = C2 = 0.0
    for t in times:
        a, b, f = problem.coefficients(t)
        C1 = max(C1, float(np.max(np.abs(b))))
        C2 = max(C2, float(np.max(np.abs(f + b * u0 + a * lap_u0))))
    drift = np.array([np.max(np.abs(np.asarray(u) - u0)) for u in u_series])
    if C1 == 0.0:
        bound = C2 * times
    else:
        bound = C2 * np.expm1(C1 * times) / C1
    if dt is not None and C1 > 0:
        if dt * C1 >= 1:
            raise ValueError("dt * sup|b| must be below 1")
        steps = np.rint(times / dt)
        bound = np.maximum(bound, C2 / C1 * ((1.0 - dt * C1) ** (-steps) - 1.0))
    return DriftReport(times, drift, bound, C1, C2)


def energy_inequality_margins(
    stencil: LaplacianStencil,
    states: Sequence[np.ndarray],
    dt: float,
    b: np.ndarray,
    f: np.ndarray,
) -> np.ndarray:
    """Per-step slack of the backward-Euler energy inequality.

    With ``E`` the Dirichlet energy and ``u = u_{n+1}``::

        E(u_{n+1}) - E(u_n) <= dt * (C1 E(u_{n+1}) + C2 (E(f) + E(b)))
        C1 = 2 sup|b| + 2,  C2 = max(1, sup u_{n+1}^2)

    for time-constant ``b, f`` and any ``a > 0``. Returns right minus left
    side per step; nonnegative values mean the inequality holds.
    """
    Eb, Ef = stencil.energy(b), stencil.energy(f)
    C1 = 2.0 * float(np.max(np.abs(b))) + 2.0
    out = []
    for prev, cur in zip(states[:-1], states[1:]):
        C2 = max(1.0, float(np.max(cur**2)))
        lhs = stencil.energy(cur) - stencil.energy(prev)
        rhs = dt * (C1 * stencil.energy(cur) + C2 * (Ef + Eb))
        out.append(rhs - lhs)
    return np.array(out)
