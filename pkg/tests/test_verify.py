"""Certification harness: cylindrical derivatives, chain-rule residuals,
dynamic-programming checks, suite isolation."""

import math

import numpy as np
import pytest

from branchfield.engine.initial import GaussianLaw
from branchfield.flows import MeasureFlow
from branchfield.lq import (LQModel, Moments, lq_moment_flow, solve_riccati)
from branchfield.measures import FiniteMeasure
from branchfield.model import ClosedLoopControl, affine_model_1d
from branchfield.timegrid import TimeGrid
from branchfield.verify import (CheckReport, CylindricalFunction,
                                TestFunction as VerifyTestFunction,
                                check_dpp, check_flow_property,
                                check_hjb_grid, check_initial_law_invariance,
                                check_mass_law, check_population_bound,
                                check_verification, generator_integral,
                                ito_formula_check, lq_exact_flow,
                                mc_cost_of_optimal_control, run_suite,
                                suite_summary)

LQ = LQModel(b1=-0.3, b2=0.4, b3=1.0, sigma=0.5, gamma=0.8,
             progeny=[0.3, 0.2, 0.5], L1=1.0, L2=0.2, L3=0.1, L4=1.0,
             g1=0.5, g2=0.3, g3=0.2, horizon=1.0)
M0 = Moments(2.0, 1.0, 1.0)
CTRL = ClosedLoopControl.affine(0.1, -0.4)


class TestCylindrical:
    def test_mass_functional(self):
        F = CylindricalFunction.total_mass()
        mu = FiniteMeasure([[0.5], [1.5]], [1.0, 2.0])
        assert F.evaluate(mu) == pytest.approx(3.0)
        x = np.array([[0.3]])
        assert F.linear_derivative(mu, x)[0] == pytest.approx(1.0)
        assert F.intrinsic_derivative(mu, x)[0, 0] == 0.0

    def test_squared_first_moment_chain_rule(self):
        F = CylindricalFunction.squared_first_moment()
        mu = FiniteMeasure([[0.5], [1.5]], [1.0, 2.0])
        m1 = 0.5 + 3.0
        assert F.evaluate(mu) == pytest.approx(m1**2)
        x = np.array([[0.7], [-0.2]])
        # dF/dm(m, x) = 2 m1 x; intrinsic derivative = 2 m1
        assert np.allclose(F.linear_derivative(mu, x), 2 * m1 * x[:, 0])
        assert np.allclose(F.intrinsic_derivative(mu, x)[:, 0], 2 * m1)

    def test_linear_derivative_against_finite_difference(self):
        F = CylindricalFunction.squared_first_moment()
        mu = FiniteMeasure([[0.4], [1.1]], [0.7, 1.3])
        x = np.array([[0.9]])
        eps = 1e-6
        bumped = FiniteMeasure(np.vstack([mu.positions, x]),
                               np.append(mu.weights, eps))
        fd = (F.evaluate(bumped) - F.evaluate(mu)) / eps
        assert F.linear_derivative(mu, x)[0] == pytest.approx(fd, rel=1e-4)

    def test_growth_guard(self):
        quartic = VerifyTestFunction(
            lambda x: 1e7 * np.atleast_2d(x)[:, 0] ** 4,
            lambda x: np.zeros(np.atleast_2d(x).shape),
            lambda x: np.zeros(np.atleast_2d(x).shape + (1,)),
        )
        with pytest.raises(ValueError, match="grows faster"):
            CylindricalFunction(lambda v: float(v[0]),
                                lambda v: np.ones(1), (quartic,))


class TestGeneratorTwoDimensional:
    def test_quadratic_functional_analytic(self):
        # F(m) = <m, |x|^2> in d = 2: dF/dm = |x|^2, intrinsic derivative
        # 2x, Jacobian 2I; for constant drift, isotropic noise and constant
        # branching the generator integral has a closed form
        sq = VerifyTestFunction(
            lambda x: np.sum(np.atleast_2d(x) ** 2, axis=1),
            lambda x: 2.0 * np.atleast_2d(x),
            lambda x: np.broadcast_to(
                2.0 * np.eye(np.atleast_2d(x).shape[1]),
                (np.atleast_2d(x).shape[0],) + (np.atleast_2d(x).shape[1],) * 2,
            ),
        )
        F = CylindricalFunction(lambda v: float(v[0]), lambda v: np.ones(1),
                                (sq,))
        drift = np.array([0.4, -0.2])
        s, gam, theta_shift = 0.3, 0.8, 0.5  # p = (0.25, 0, 0.75): shift 0.5

        from branchfield.model import ModelCoefficients, ProgenyLaw

        model = ModelCoefficients(
            b=lambda t, x, m, a: np.broadcast_to(
                drift, np.atleast_2d(x).shape).copy(),
            sigma=lambda t, x, m, a: np.full(np.atleast_2d(x).shape[0], s),
            gamma=lambda t, x, m, a: np.full(np.atleast_2d(x).shape[0], gam),
            gamma_bar=1.0,
            progeny=ProgenyLaw.constant([0.25, 0.0, 0.75]),
            dimension=2,
        )
        mu = FiniteMeasure(np.array([[1.0, 2.0], [-0.5, 0.5]]), [1.0, 2.0])
        got = generator_integral(F, model, ClosedLoopControl.zero(), mu, 0.0)
        w, x = mu.weights, mu.positions
        expected = (
            float(w @ (2 * x @ drift))            # transport
            + 0.5 * s**2 * 2 * 2 * mu.mass        # diffusion: tr(s^2 I 2I)/2
            + gam * theta_shift * float(w @ np.sum(x**2, axis=1))
        )
        assert got == pytest.approx(expected, rel=1e-12)


class TestItoFormula:
    def test_ode_backed_flows_tight(self):
        grid = TimeGrid.from_dt(0, 1.0, 1e-3)
        flow = lq_exact_flow(LQ, M0, CTRL, grid)
        model = LQ.dynamics()
        for F in (CylindricalFunction.total_mass(),
                  CylindricalFunction.first_moment(),
                  CylindricalFunction.squared_first_moment()):
            rep = ito_formula_check(F, model, CTRL, flow, (0.0, 1.0), 1e-6)
            assert rep.passed, rep.statistic

    def test_mass_identity_reduces_to_theta_integral(self):
        grid = TimeGrid.from_dt(0, 1.0, 1e-3)
        flow = lq_exact_flow(LQ, M0, CTRL, grid)
        F = CylindricalFunction.total_mass()
        val = generator_integral(F, LQ.dynamics(), CTRL,
                                 flow.measure_at(0.5), 0.5)
        assert val == pytest.approx(LQ.theta * flow.mass_at(0.5), rel=1e-12)

    def test_mc_backed_residual_halves(self):
        # on simulated flows the residual is dominated by the O(dt) weak
        # bias of the step scheme, so halving dt halves it (within 40%)
        from branchfield.engine.simulate import (RecordOptions,
                                                 simulate_population)

        theta = 0.7
        model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=[0.15, 0.0, 0.85])
        nu0 = FiniteMeasure([[0.0]], [1.0])
        F = CylindricalFunction.total_mass()
        residuals = []
        for dt in (0.1, 0.05):
            grid = TimeGrid.from_dt(0, 1.0, dt)
            flow_const = MeasureFlow.constant(nu0, grid.times)
            res = simulate_population(model, ClosedLoopControl.zero(),
                                      flow_const, grid, 400_000, 31, nu0)
            ts, mass, m1, m2 = res.moment_estimates()
            flow = MeasureFlow.from_moments(ts, mass, m1, m2, "empirical")
            rep = ito_formula_check(F, model, ClosedLoopControl.zero(), flow,
                                    (0.0, 1.0), tol=np.inf)
            residuals.append(rep.statistic)
        ratio = residuals[0] / residuals[1]
        assert 2 * 0.6 <= ratio <= 2 * 1.4


class TestChecks:
    def test_hjb_grid_pass_and_fail(self):
        good = check_hjb_grid(LQ, n_points=125, tol=1e-6)
        assert good.passed
        bad = check_hjb_grid(LQ, n_points=125, tol=1e-6,
                             convention="paper_printed")
        assert not bad.passed

    def test_dpp_degenerate_and_generic(self):
        sol = solve_riccati(LQ, 2000)
        same = check_dpp(LQ, M0, 0.4, 0.4, [], sol=sol)
        assert same.passed and same.statistic == 0.0
        at_horizon = check_dpp(LQ, M0, 0.0, 1.0, [(0.2, -0.1)], sol=sol)
        assert at_horizon.passed
        generic = check_dpp(LQ, M0, 0.2, 0.7,
                            [(0.1 * i - 1, 0.05 * i) for i in range(20)],
                            sol=sol)
        assert generic.passed

    def test_dpp_rhs_monotone_under_panel_growth(self):
        sol = solve_riccati(LQ, 1000)
        small = check_dpp(LQ, M0, 0.1, 0.6, [(0.5, 0.0)], sol=sol)
        grown = check_dpp(LQ, M0, 0.1, 0.6, [(0.5, 0.0), (-0.3, 0.2)],
                          sol=sol)
        assert grown.details["rhs_min"] <= small.details["rhs_min"] + 1e-12

    def test_verification_deterministic(self):
        rep = check_verification(LQ, M0, [(0.3, 0.0), (-0.2, 0.1),
                                          (0.0, 0.5)])
        assert rep.passed

    def test_verification_zero_cost_model(self):
        zero = LQModel(b1=-0.3, b2=0.2, b3=1.0, sigma=0.4, gamma=1.0,
                       progeny=[0.5, 0.0, 0.5], L1=0, L2=0, L3=0, L4=1.0,
                       g1=0, g2=0, g3=0, horizon=1.0)
        rep = check_verification(zero, M0, [(0.1, -0.1)])
        assert rep.passed
        assert rep.details["value"] == 0.0

    def test_population_bound_supercritical(self):
        model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=[0.0, 0.0, 1.0])
        grid = TimeGrid.from_dt(0, 1.0, 0.02)
        nu0 = FiniteMeasure([[0.0]], [1.0])
        rep = check_population_bound(model, ClosedLoopControl.zero(), nu0,
                                     grid, 10_000, 3, m1_bound=2.0)
        assert rep.passed
        assert rep.statistic <= math.exp(2.0) + 3 * rep.details["standard_error"]

    def test_population_bound_needs_trees(self):
        model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=[1.0])
        grid = TimeGrid.from_dt(0, 0.5, 0.1)
        with pytest.raises(ValueError, match="10\\^4"):
            check_population_bound(model, ClosedLoopControl.zero(),
                                   FiniteMeasure([[0.0]], [1.0]), grid, 100,
                                   0, m1_bound=1.0)

    def test_mass_law_check(self):
        model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=[0.5, 0.5])
        grid = TimeGrid.from_dt(0, 1.0, 5e-3)
        rep = check_mass_law(model, ClosedLoopControl.zero(),
                             FiniteMeasure([[0.0]], [2.0]), grid, 10_000, 4,
                             theta=-0.5)
        assert rep.passed

    def test_initial_law_invariance_null_and_real(self):
        model = affine_model_1d(0.1, 0, 0, sigma=0.4, gamma=1.0,
                                progeny_probs=[0.25, 0.5, 0.25])
        grid = TimeGrid.from_dt(0, 0.5, 0.02)
        law = GaussianLaw(mass=2.5, mean=0.0, sd=1.0)
        flow = MeasureFlow.constant(law.as_finite_measure(500, seed=2),
                                    grid.times)
        rep = check_initial_law_invariance(
            model, ClosedLoopControl.zero(), law,
            ("bernoulli_residual", "poisson"), grid, 10_000, 12, flow=flow,
        )
        assert rep.passed, rep.details

    def test_mc_cost_of_optimal_control(self):
        grid = TimeGrid.from_dt(0, 1.0, 0.01)
        est = mc_cost_of_optimal_control(LQ, M0, grid, 2000, 21)
        sol = solve_riccati(LQ, 2000)
        from branchfield.lq import lq_value

        w0 = lq_value(sol, 0.0, M0)
        assert abs(est.mean - w0) <= 3 * est.std_error + 0.05


class TestSuiteRunner:
    def test_failure_isolation_and_summary(self):
        def ok():
            return CheckReport("z_ok", 0.0, 1.0, True)

        def boom():
            raise RuntimeError("exploded")

        reports = run_suite([("z_ok", ok), ("a_boom", boom)],
                            config_hash="abc")
        assert [r.name for r in reports] == ["a_boom", "z_ok"]
        assert not reports[0].passed
        assert "exploded" in reports[0].details["error"]
        assert reports[1].passed
        summary = suite_summary(reports)
        assert summary["n_checks"] == 2 and summary["n_passed"] == 1
        assert not summary["all_passed"]
