"""Linear-quadratic machinery: Riccati solver against closed forms and an
independent adaptive integrator, value/control/moment identities, Bellman
residual certification of the theta convention."""

import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from branchfield.errors import RiccatiBlowupError
from branchfield.lq import (LQModel, Moments, hamiltonian_integrand,
                            hjb_residual, lq_cost_ode, lq_moment_flow,
                            lq_optimal_control, lq_running_segment,
                            lq_terminal_cost, lq_value,
                            optimal_affine_coefficients, solve_riccati)
from branchfield.lq import _riccati_rhs


def constant_model(**overrides):
    params = dict(b1=-0.3, b2=0.4, b3=1.0, sigma=0.5, gamma=0.8,
                  progeny=[0.3, 0.2, 0.5], L1=1.0, L2=0.2, L3=0.1, L4=1.0,
                  g1=0.5, g2=0.3, g3=0.2, horizon=1.0)
    params.update(overrides)
    return LQModel(**params)


class TestSolveRiccati:
    def test_linear_lambda(self):
        # decoupled linear equation: Lambda(t) = g1 + L1 (T - t)
        m = constant_model(b1=0.0, b3=0.0, progeny=[0.0, 1.0], L1=0.7,
                           g1=2.0, b2=0.0)
        assert m.theta == 0.0
        sol = solve_riccati(m, 500)
        for t in (0.0, 0.3, 1.0):
            assert sol.coefficients(t)[0] == pytest.approx(
                2.0 + 0.7 * (1.0 - t), abs=1e-10)

    def test_all_zero_costs(self):
        m = constant_model(L1=0, L2=0, L3=0, g1=0, g2=0, g3=0)
        sol = solve_riccati(m, 200)
        assert np.abs(sol.values).max() == 0.0

    def test_against_adaptive_reference(self):
        m = constant_model()
        rhs = _riccati_rhs(m, "theta_explicit")
        terminal = [m.g1, 0.0, m.g3, m.g2, 0.0]
        ref = solve_ivp(rhs, [m.horizon, 0.0], terminal, rtol=1e-12,
                        atol=1e-14, dense_output=True)
        sol = solve_riccati(m, 1000)
        for t in (0.0, 0.25, 0.6):
            assert np.max(np.abs(sol.coefficients(t) - ref.sol(t))) < 1e-8

    def test_gamma3_closed_form(self):
        # Gamma3' + L2 + 2 theta Gamma3 = 0, Gamma3(T) = g2
        m = constant_model()
        th = m.theta
        assert th != 0
        sol = solve_riccati(m, 1000)
        for t in (0.0, 0.5):
            expected = (m.g2 * math.exp(2 * th * (1 - t))
                        + 0.2 * (math.exp(2 * th * (1 - t)) - 1) / (2 * th))
            assert sol.coefficients(t)[3] == pytest.approx(expected,
                                                           abs=1e-10)

    def test_terminal_conditions_exact(self):
        m = constant_model()
        sol = solve_riccati(m, 100)
        assert tuple(sol.values[-1]) == (m.g1, 0.0, m.g3, m.g2, 0.0)

    def test_blowup_guard(self):
        m = constant_model(b3=6.0, L4=1e-4, g1=5.0, L1=0.0, horizon=2.0)
        with pytest.raises(RiccatiBlowupError):
            solve_riccati(m, 500)

    def test_nonpositive_l4_rejected(self):
        with pytest.raises(ValueError, match="L4"):
            constant_model(L4=0.0)

    def test_rk4_order(self):
        m = constant_model(b3=2.0, L1=2.0, g1=1.5)
        vals = {}
        for n in (100, 200, 400):
            vals[n] = solve_riccati(m, n).values[0]
        e1 = np.max(np.abs(vals[100] - vals[200]))
        e2 = np.max(np.abs(vals[200] - vals[400]))
        order = math.log2(e1 / e2)
        assert order >= 3.5

    def test_csv_export(self):
        sol = solve_riccati(constant_model(), 50)
        lines = sol.to_csv().strip().split("\n")
        assert lines[0] == "t,Lambda,Gamma1,Gamma2,Gamma3,Gamma4"
        assert len(lines) == 52


class TestValueAndControl:
    def test_zero_measure(self):
        sol = solve_riccati(constant_model(), 100)
        assert lq_value(sol, 0.3, Moments(0.0, 0.0, 0.0)) == 0.0

    def test_terminal_value_matches_terminal_cost(self):
        m = constant_model()
        sol = solve_riccati(m, 100)
        mm = Moments(2.0, -1.0, 3.0)
        expected = m.g1 * 3.0 + m.g2 * 4.0 + m.g3 * 2.0 * (-1.0)
        assert lq_value(sol, m.horizon, mm) == pytest.approx(expected)
        assert lq_terminal_cost(m, mm) == pytest.approx(expected)

    def test_lambda_only_value(self):
        # every coefficient off except L1/g1 (sigma = 0 keeps Gamma1 = 0)
        m = constant_model(b1=0.0, b3=0.0, b2=0.0, sigma=0.0,
                           progeny=[0.0, 1.0],
                           L1=0.7, L2=0, L3=0, g1=2.0, g2=0, g3=0)
        sol = solve_riccati(m, 400)
        # m = (1, 0, 2) at t = 0: value = 2 (g1 + L1 T)
        assert lq_value(sol, 0.0, Moments(1.0, 0.0, 2.0)) == pytest.approx(
            2 * (2.0 + 0.7), abs=1e-9)

    def test_control_zero_when_b3_zero(self):
        sol = solve_riccati(constant_model(b3=0.0), 100)
        assert lq_optimal_control(sol, 0.5, 3.0, 2.0) == 0.0

    def test_control_direct_substitution(self):
        # Lambda = 1, Gamma2 = 0, L4 = 1, b3 = 1, x = 2 -> a = -2
        m = constant_model(b3=1.0, L4=1.0)
        sol = solve_riccati(m, 100)
        lam, _, g2v, _, _ = sol.coefficients(0.2)
        a = lq_optimal_control(sol, 0.2, 2.0, 0.0)
        assert a == pytest.approx(-(2 * lam * 2.0) / 2.0)

    def test_moments_validation(self):
        with pytest.raises(ValueError):
            Moments(0.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            Moments(1.0, 2.0, 1.0)  # m1^2 > mass * m2


class TestMomentFlow:
    def test_frozen_when_rates_vanish(self):
        m = constant_model(b1=0, b2=0, b3=0, sigma=0.0, progeny=[0.5, 0, 0.5],
                           gamma=1.0)
        assert m.theta == 0.0
        mf = lq_moment_flow(m, (0.0, 0.0), 0.0, Moments(2.0, 1.0, 3.0), 100)
        assert np.allclose(mf.mass, 2.0) and np.allclose(mf.m1, 1.0)
        assert np.allclose(mf.m2, 3.0)

    def test_mass_exponential_law(self):
        m = constant_model()
        mf = lq_moment_flow(m, (0.3, -0.2), 0.0, Moments(2.0, 1.0, 3.0), 400)
        expected = 2.0 * np.exp(m.theta * mf.times)
        assert np.max(np.abs(mf.mass - expected)) < 1e-10

    def test_cost_zero_model(self):
        m = constant_model(L1=0, L2=0, L3=0, L4=1.0, g1=0, g2=0, g3=0)
        assert lq_cost_ode(m, (0.0, 0.0), 0.0, Moments(1.0, 0.5, 1.0)) == \
            pytest.approx(0.0, abs=1e-12)

    def test_heat_flow_second_moment(self):
        # L = 0, g = x^2, no drift/branching, sigma = 1, start at delta_x0:
        # cost = x0^2 + T
        x0 = 0.7
        m = constant_model(b1=0, b2=0, b3=0, sigma=1.0, gamma=1.0,
                           progeny=[0.0, 1.0], L1=0, L2=0, L3=0,
                           g1=1.0, g2=0, g3=0)
        val = lq_cost_ode(m, (0.0, 0.0), 0.0, Moments(1.0, x0, x0**2))
        assert val == pytest.approx(x0**2 + 1.0, abs=1e-9)

    def test_verification_equality_and_suboptimality(self):
        m = constant_model()
        sol = solve_riccati(m, 2000)
        m0 = Moments(2.0, 1.0, 1.0)
        k0, k1 = optimal_affine_coefficients(sol, 0.0, m0.mass)
        value = lq_value(sol, 0.0, m0)
        assert lq_cost_ode(m, (k0, k1), 0.0, m0) == pytest.approx(
            value, abs=1e-6)
        rng = np.random.default_rng(0)
        for _ in range(20):
            d0, d1 = rng.normal(scale=0.4, size=2)
            pert = (lambda t, d=d0: k0(t) + d, lambda t, d=d1: k1(t) + d)
            assert lq_cost_ode(m, pert, 0.0, m0) >= value - 1e-6

    def test_running_segment_consistency(self):
        m = constant_model()
        m0 = Moments(2.0, 1.0, 1.5)
        seg, mid = lq_running_segment(m, (0.2, -0.1), 0.0, m0, 0.5)
        seg2, end = lq_running_segment(m, (0.2, -0.1), 0.5, mid, 1.0)
        total = lq_cost_ode(m, (0.2, -0.1), 0.0, m0) - lq_terminal_cost(m, end)
        # piecewise integration must match the single sweep
        full_flow_cost = seg + seg2
        assert full_flow_cost == pytest.approx(total, abs=1e-8)


class TestHJBResidual:
    def test_zero_measure(self):
        sol = solve_riccati(constant_model(), 200)
        assert hjb_residual(sol, 0.4, Moments(0.0, 0.0, 0.0)) == 0.0

    def test_explicit_convention_certified(self):
        sol = solve_riccati(constant_model(), 2000)
        rng = np.random.default_rng(1)
        for _ in range(50):
            mb = rng.uniform(0.1, 5.0)
            mean = rng.uniform(-5, 5)
            m1 = mb * mean / 5
            m2 = m1**2 / mb + rng.uniform(0.0, 3.0) * mb
            t = rng.uniform(0, 0.999)
            assert abs(hjb_residual(sol, t, Moments(mb, m1, m2))) < 1e-6

    def test_printed_convention_fails_unless_theta_is_one(self):
        m = constant_model()
        assert abs(m.theta - 1.0) > 0.1
        sol = solve_riccati(m, 1000, convention="paper_printed")
        mm = Moments(2.0, 1.0, 1.5)
        assert abs(hjb_residual(sol, 0.3, mm)) > 1e-3

        # with theta = 1 the two writings coincide
        m1 = constant_model(gamma=1.0, progeny=[0.0, 0.0, 1.0])
        assert m1.theta == pytest.approx(1.0)
        sol1 = solve_riccati(m1, 1000, convention="paper_printed")
        assert abs(hjb_residual(sol1, 0.3, mm)) < 1e-6

    def test_perturbed_lambda_breaks_residual(self):
        from branchfield.lq import RiccatiSolution

        m = constant_model()
        sol = solve_riccati(m, 1000)
        bumped = RiccatiSolution(
            m, sol.convention, sol.times,
            sol.values + np.array([1.0, 0, 0, 0, 0]), sol.deriv_values,
        )
        mm = Moments(1.0, 0.0, 1.0)
        assert abs(hjb_residual(bumped, 0.5, mm)) > 0.1 * mm.m2

    def test_pointwise_minimality(self):
        sol = solve_riccati(constant_model(), 500)
        rng = np.random.default_rng(2)
        for _ in range(50):
            t = rng.uniform(0, 1)
            x = rng.normal(scale=2)
            mb = rng.uniform(0.1, 4)
            a_star = lq_optimal_control(sol, t, x, mb)
            h_star = hamiltonian_integrand(sol, t, x, mb, a_star)
            a = rng.normal(scale=3)
            assert h_star <= hamiltonian_integrand(sol, t, x, mb, a) + 1e-12

    def test_dpp_identity_along_optimal_flow(self):
        m = constant_model()
        sol = solve_riccati(m, 2000)
        m0 = Moments(2.0, 1.0, 1.0)
        opt = optimal_affine_coefficients(sol, 0.0, m0.mass)
        w0 = lq_value(sol, 0.0, m0)
        for s in (0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
            seg, ms = lq_running_segment(m, opt, 0.0, m0, s)
            assert seg + lq_value(sol, s, ms) == pytest.approx(w0, abs=1e-6)
