from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coneflow.geometry import build_flat_torus, build_football
from coneflow.linear_parabolic import (
    LinearProblem,
    OdeEscape,
    c0_drift_bound,
    energy_inequality_margins,
    ode_comparison,
    solve_linear,
    solve_sk_sequence,
    step_linear,
    verify_max_principle,
)


def curvature_ode_exact(h0: float, r: float, t):
    """Closed form of h' = h(2h - r) via y = 1/h, y' = r y - 2."""
    t = np.asarray(t, dtype=float)
    if r == 0:
        return h0 / (1.0 - 2.0 * h0 * t)
    y = 2.0 / r + (1.0 / h0 - 2.0 / r) * np.exp(r * t)
    return 1.0 / y


class TestStepLinear:
    @pytest.mark.parametrize("dt", [1e-3, 0.1, 10.0])
    def test_constant_stays_constant(self, pillow, dt):
        p = LinearProblem(1.0, 0.0, 0.0, np.full(pillow.n_nodes, 2.5), T=1.0)
        u = step_linear(p.u0, p, 0.0, dt, stencil=pillow.stencil).values
        np.testing.assert_allclose(u, 2.5, rtol=1e-12)

    def test_reaction_only_matches_backward_euler_closed_form(self, pillow):
        lam, dt, n = -1.3, 0.01, 50
        p = LinearProblem(1.0, lam, 0.0, np.full(pillow.n_nodes, 0.7), T=dt * n)
        t, states = solve_linear(p, pillow.stencil, dt, record=True)
        expected = 0.7 / (1 - lam * dt) ** np.arange(n + 1)
        np.testing.assert_allclose(states[:, 0], expected, rtol=1e-12)
        assert abs(states[-1, 0] - 0.7 * math.exp(lam * t[-1])) < 5 * dt

    def test_cosine_mode_decays_at_discrete_eigenvalue(self):
        s = build_flat_torus(1.0, 1.0, 24, 24)
        x = s.coords[:, 0]
        u0 = np.cos(2 * np.pi * x)
        mu = s.stencil.energy(u0) / (s.areas @ (u0 * u0))
        T = 0.02
        for dt in (1e-4, 5e-5):
            p = LinearProblem(1.0, 0.0, 0.0, u0, T)
            u = solve_linear(p, s.stencil, dt)
            rate = -math.log((s.areas @ (u * u0)) / (s.areas @ (u0 * u0))) / T
            assert rate == pytest.approx(mu, rel=1e-2)

    def test_crank_nicolson_is_second_order(self):
        s = build_flat_torus(1.0, 1.0, 16, 16)
        u0 = np.cos(2 * np.pi * s.coords[:, 0])
        mu = s.stencil.energy(u0) / (s.areas @ (u0 * u0))
        T = 0.01
        errs = {}
        for scheme in ("implicit", "crank_nicolson"):
            errs[scheme] = []
            for dt in (2e-3, 1e-3):
                u = solve_linear(LinearProblem(1.0, 0.0, 0.0, u0, T), s.stencil, dt, scheme)
                errs[scheme].append(np.max(np.abs(u - u0 * math.exp(-mu * T))))
        assert errs["implicit"][0] / errs["implicit"][1] == pytest.approx(2.0, rel=0.1)
        assert errs["crank_nicolson"][0] / errs["crank_nicolson"][1] == pytest.approx(4.0, rel=0.1)

    def test_unknown_scheme(self, pillow):
        p = LinearProblem(1.0, 0.0, 0.0, np.zeros(pillow.n_nodes), 1.0)
        with pytest.raises(ValueError):
            step_linear(p.u0, p, 0.0, 0.1, "explicit", stencil=pillow.stencil)

    def test_coefficient_bound_enforced(self, pillow):
        p = LinearProblem(0.05, 0.0, 0.0, np.zeros(pillow.n_nodes), 1.0, a_min=0.1)
        with pytest.raises(ValueError, match="declared bound"):
            step_linear(p.u0, p, 0.0, 0.1, stencil=pillow.stencil)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.floats(-3.0, 0.0), dt=st.floats(1e-3, 1.0))
def test_discrete_maximum_principle(hyper, seed, b, dt):
    rng = np.random.default_rng(seed)
    u0 = rng.standard_normal(hyper.n_nodes)
    a = np.exp(rng.uniform(-1, 1, hyper.n_nodes))
    p = LinearProblem(a, b, 0.0, u0, T=dt)
    u = step_linear(u0, p, 0.0, dt, stencil=hyper.stencil).values
    # b <= 0 pulls toward zero, so the bounds are min(u0, 0) and max(u0, 0)
    assert u.max() <= max(u0.max(), 0.0) + 1e-9
    assert u.min() >= min(u0.min(), 0.0) - 1e-9


class TestSkSequence:
    def test_constant_data_gives_zero_differences(self):
        s = build_football(-0.5, -0.5, 256)
        p = LinearProblem(1.0, 0.0, 0.0, np.full(s.n_nodes, 1.5), 0.01)
        levels = solve_sk_sequence(p, s, range(2, 5), 1e-3)
        for lev in levels[1:]:
            assert lev.sup_diff < 1e-12
        assert all(lev.full_diff < 1e-12 for lev in levels)

    def test_differences_decrease_for_bump_away_from_tips(self):
        s = build_football(-0.5, -0.5, 1024)
        u0 = np.exp(-(((s.rho - 0.5 * math.pi) / 0.3) ** 2))
        p = LinearProblem(1.0, 0.0, 0.0, u0, 0.025)
        diffs = [lev.sup_diff for lev in solve_sk_sequence(p, s, range(3, 8), 1e-3)][1:]
        assert all(b < a for a, b in zip(diffs, diffs[1:]))

    def test_level_at_grid_floor(self):
        s = build_football(-0.5, -0.5, 64)
        p = LinearProblem(1.0, 0.0, 0.0, np.zeros(s.n_nodes), 0.01)
        with pytest.raises(ValueError, match="grid floor"):
            solve_sk_sequence(p, s, range(3, 7), 1e-3)


class TestOde:
    def test_zero_field(self):
        sol = ode_comparison(lambda h: 0.0, 1.7, 2.0, 0.1)
        np.testing.assert_array_equal(sol.values, 1.7)

    def test_linear_ode(self):
        sol = ode_comparison(lambda h: -0.8 * h, 2.0, 3.0, 0.1)
        np.testing.assert_allclose(sol.values, 2.0 * np.exp(-0.8 * sol.times), rtol=1e-8)

    @pytest.mark.parametrize("h0,r", [(-1.7, -2.0), (-0.3, -2.0), (0.4, 1.0), (-0.5, 0.0), (0.2, 0.0)])
    def test_curvature_ode_closed_form(self, h0, r):
        T = 1.0
        sol = ode_comparison(lambda h: h * (2 * h - r), h0, T, 0.01)
        np.testing.assert_allclose(sol.values, curvature_ode_exact(h0, r, sol.times), rtol=1e-8)

    def test_escape_time_reported(self):
        # h' = h^2 escapes at 1/h0
        with pytest.raises(OdeEscape) as exc:
            ode_comparison(lambda h: h * h, 2.0, 1.0, 0.01)
        assert exc.value.escape_time == pytest.approx(0.5, abs=1e-3)


class TestMaxPrinciple:
    def test_equality_case(self):
        t = np.linspace(0, 1, 11)
        series = [np.full(5, 2.0 * math.exp(-t_)) for t_ in t]
        rep = verify_max_principle(t, series, lambda h: -h, 2.0)
        assert rep.ok
        assert np.max(np.abs(rep.margin)) < 1e-8

    def test_heat_equation_max_nonincreasing(self, pillow, rng):
        u0 = rng.standard_normal(pillow.n_nodes)
        t, states = solve_linear(LinearProblem(1.0, 0.0, 0.0, u0, 0.5), pillow.stencil, 0.05, record=True)
        assert verify_max_principle(t, states, lambda h: 0.0, u0.max()).ok
        assert verify_max_principle(t, states, lambda h: 0.0, u0.min(), side="lower").ok

    def test_violation_detected(self):
        t = np.array([0.0, 1.0])
        rep = verify_max_principle(t, [np.zeros(3), np.ones(3)], lambda h: 0.0, 0.0)
        assert not rep.ok and rep.violations.tolist() == [1]


class TestDrift:
    def test_manufactured_stationary(self, pillow, rng):
        u0 = rng.standard_normal(pillow.n_nodes)
        b = -0.5
        f = -pillow.stencil.apply(u0) - b * u0
        p = LinearProblem(1.0, b, f, u0, 0.5)
        t, states = solve_linear(p, pillow.stencil, 0.05, record=True)
        rep = c0_drift_bound(t, states, p, pillow.stencil, dt=0.05)
        assert rep.C2 < 1e-12
        assert rep.drift.max() < 1e-9

    def test_b_zero_bound_is_linear(self, pillow, rng):
        u0 = rng.standard_normal(pillow.n_nodes)
        p = LinearProblem(1.0, 0.0, 0.3, u0, 0.5)
        t, states = solve_linear(p, pillow.stencil, 0.05, record=True)
        rep = c0_drift_bound(t, states, p, pillow.stencil)
        assert rep.C1 == 0.0
        np.testing.assert_allclose(rep.bound, rep.C2 * t)
        assert rep.ok

    def test_generic_problem_with_margin(self, pillow, rng):
        u0 = np.sin(pillow.coords[:, 0]) + 0.3 * pillow.coords[:, 1]
        a = np.exp(0.2 * rng.standard_normal(pillow.n_nodes))
        p = LinearProblem(a, 0.4, 0.1 * np.cos(pillow.coords[:, 1]), u0, 1.0)
        t, states = solve_linear(p, pillow.stencil, 0.02, record=True)
        rep = c0_drift_bound(t, states, p, pillow.stencil, dt=0.02)
        assert rep.ok
        assert np.all(rep.drift[1:] < rep.bound[1:])


def test_energy_inequality_along_implicit_steps(hyper, rng):
    u0 = rng.standard_normal(hyper.n_nodes)
    b = 0.3 * rng.standard_normal(hyper.n_nodes)
    f = rng.standard_normal(hyper.n_nodes)
    a = np.exp(0.3 * rng.standard_normal(hyper.n_nodes))
    dt = 0.01
    t, states = solve_linear(LinearProblem(a, b, f, u0, 0.3), hyper.stencil, dt, record=True)
    margins = energy_inequality_margins(hyper.stencil, list(states), dt, b, f)
    assert margins.min() >= 0.0
