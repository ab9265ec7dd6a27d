"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line with its statistic and runtime.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines.  Budgets are wall-clock upper bounds at desk scale; tolerances are
fixed here, not calibrated at runtime.
"""

import math
import time

import numpy as np
import pytest

from branchfield import rng
from branchfield.engine.initial import GaussianLaw
from branchfield.engine.simulate import RecordOptions, simulate_population
from branchfield.flows import MeasureFlow
from branchfield.lq import (LQModel, Moments, hjb_residual, lq_cost_ode,
                            lq_value, optimal_affine_coefficients,
                            solve_riccati)
from branchfield.measures import (CemeteryMetricSpec, Configuration,
                                  FiniteMeasure, config_distance,
                                  equal_weight_atoms, moments, wbar1)
from branchfield.meanfield import flow_property_check
from branchfield.model import ClosedLoopControl, affine_model_1d
from branchfield.timegrid import TimeGrid
from branchfield.verify import (CylindricalFunction, check_dpp,
                                check_hjb_grid, check_initial_law_invariance,
                                check_population_bound,
                                ito_formula_check, lq_exact_flow,
                                mc_cost_of_optimal_control)
from branchfield.engine import sample_offspring
from branchfield.fokker_planck import FrozenCoefficients, SpaceGrid, fp_solve


def lq_base(progeny, gamma=0.8, **overrides):
    params = dict(b1=-0.3, b2=0.4, b3=1.0, sigma=0.5, gamma=gamma,
                  progeny=progeny, L1=1.0, L2=0.2, L3=0.1, L4=1.0,
                  g1=0.5, g2=0.3, g3=0.2, horizon=1.0)
    params.update(overrides)
    return LQModel(**params)


BASE_LQ = lq_base([0.3, 0.2, 0.5])
M0 = Moments(2.0, 1.0, 1.0)
NU0 = GaussianLaw(mass=2.0, mean=0.5, sd=0.5)


def report(num: int, name: str, passed: bool, detail: str, elapsed: float,
           budget: float):
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] criterion {num:02d} {name}: {detail} "
          f"({elapsed:.1f}s / budget {budget:.0f}s)")
    assert passed, f"criterion {num} failed: {detail}"
    assert elapsed < budget, f"criterion {num} exceeded budget: {elapsed:.1f}s"


def test_criterion_01_hjb_residual_certification():
    start = time.time()
    models = {
        "subcritical": lq_base([0.6, 0.2, 0.2], gamma=1.0),
        "critical": lq_base([0.25, 0.5, 0.25], gamma=1.0),
        "supercritical": lq_base([0.1, 0.2, 0.7], gamma=1.0),
    }
    thetas = [m.theta for m in models.values()]
    assert thetas[0] < 0 < thetas[2] and thetas[1] == 0
    worst = 0.0
    for model in models.values():
        rep = check_hjb_grid(model, n_points=1000, tol=1e-6)
        worst = max(worst, rep.statistic)
        assert rep.passed
    report(1, "hjb-residual", worst < 1e-6,
           f"max |residual| = {worst:.3e} over 3x1000 states",
           time.time() - start, 5.0)


def test_criterion_02_verification_deterministic():
    start = time.time()
    sol = solve_riccati(BASE_LQ, 2000)
    value = lq_value(sol, 0.0, M0)
    k0, k1 = optimal_affine_coefficients(sol, 0.0, M0.mass)
    # 800 RK4 steps carry ~1e-12 relative error, far inside the tolerance
    gap = abs(lq_cost_ode(BASE_LQ, (k0, k1), 0.0, M0, n_steps=800) - value)
    seeded = np.random.default_rng(2)
    worst_sub = 0.0
    for _ in range(20):
        d0, d1 = seeded.normal(scale=0.4, size=2)
        pert = (lambda t, d=d0: k0(t) + d, lambda t, d=d1: k1(t) + d)
        worst_sub = max(worst_sub,
                        value - lq_cost_ode(BASE_LQ, pert, 0.0, M0,
                                            n_steps=800))
    passed = gap <= 1e-6 and worst_sub <= 1e-6
    report(2, "verification-deterministic", passed,
           f"|cost(a*) - value| = {gap:.3e}, "
           f"max value-minus-perturbed-cost = {worst_sub:.3e}",
           time.time() - start, 5.0)


def test_criterion_03_verification_stochastic():
    start = time.time()
    grid = TimeGrid.from_dt(0.0, 1.0, 1e-3)
    est = mc_cost_of_optimal_control(BASE_LQ, M0, grid, n_trees=10_000,
                                     seed=314, nu0=NU0)
    sol = solve_riccati(BASE_LQ, 2000)
    value = lq_value(sol, 0.0, M0)
    z = abs(est.mean - value) / est.std_error
    rel_se = est.std_error / abs(value)
    passed = z <= 3.0 and rel_se < 0.02
    report(3, "verification-stochastic", passed,
           f"MC {est.mean:.4f} vs value {value:.4f}, z = {z:.2f}, "
           f"relative SE = {100 * rel_se:.2f}%",
           time.time() - start, 180.0)


def test_criterion_04_population_bound():
    start = time.time()
    model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                            progeny_probs=[0.0, 0.0, 1.0])
    grid = TimeGrid.from_dt(0, 1.0, 0.01)
    nu0 = FiniteMeasure([[0.0]], [1.0])
    rep = check_population_bound(model, ClosedLoopControl.zero(), nu0, grid,
                                 n_trees=100_000, rng_seed=41, m1_bound=2.0)
    report(4, "population-bound", rep.passed,
           f"mean sup count = {rep.statistic:.4f} <= e^2 + 3 SE = "
           f"{rep.threshold:.4f}",
           time.time() - start, 120.0)


def test_criterion_05_mass_law():
    start = time.time()
    cases = {
        -0.5: [0.5, 0.5],
        0.0: [0.5, 0.0, 0.5],
        0.7: [0.15, 0.0, 0.85],
    }
    details = []
    passed = True
    for theta, progeny in cases.items():
        model = affine_model_1d(0, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=progeny)
        grid = TimeGrid.from_dt(0, 1.0, 5e-3)
        nu0 = FiniteMeasure([[0.0], [1.0]], [1.0, 1.0])
        flow = MeasureFlow.constant(nu0, grid.times)
        res = simulate_population(
            model, ClosedLoopControl.zero(), flow, grid, 10_000,
            rng.derive_seed(51, int(10 * theta) + 10), nu0,
            record=RecordOptions(per_tree_moment_times=[1.0]),
        )
        ratio = res.total_counts[-1] / 10_000 / 2.0
        se = res.tree_counts[0].std(ddof=1) / math.sqrt(10_000) / 2.0
        z = abs(ratio - math.exp(theta)) / se
        details.append(f"theta={theta:+.1f}: z={z:.2f}")
        passed = passed and z <= 3.0
    report(5, "mass-law", passed, ", ".join(details),
           time.time() - start, 120.0)


def test_criterion_06_flow_property():
    start = time.time()
    grid = TimeGrid.from_dt(0, 1.0, 0.01)
    rep = flow_property_check(BASE_LQ.dynamics(),
                              ClosedLoopControl.affine(0.1, -0.4), NU0,
                              grid, 0.0, 0.5, 1.0, n_trees=6000,
                              rng_seed=61, picard_tol=0.3)
    zs = [d / se if se > 0 else 0.0
          for d, se in zip(rep.moment_difference, rep.moment_se)]
    passed = max(zs) <= 3.0
    report(6, "flow-property", passed,
           f"restart at T/2: moment z-scores {[f'{z:.2f}' for z in zs]}, "
           f"wbar1 at T = {rep.wbar1_at_s:.3f}",
           time.time() - start, 180.0)


def test_criterion_07_initial_law_invariance():
    start = time.time()
    model = affine_model_1d(-0.2, 0.0, 0.0, sigma=0.4, gamma=1.0,
                            progeny_probs=[0.25, 0.5, 0.25])
    grid = TimeGrid.from_dt(0, 1.0, 0.01)
    law = GaussianLaw(mass=2.5, mean=0.0, sd=1.0)
    flow = MeasureFlow.constant(law.as_finite_measure(500, seed=3),
                                grid.times)
    rep = check_initial_law_invariance(
        model, ClosedLoopControl.zero(), law,
        ("bernoulli_residual", "poisson"), grid, n_trees=10_000,
        rng_seed=71, flow=flow,
    )
    report(7, "initial-law-invariance", rep.passed,
           f"max standardized moment difference = {rep.statistic:.2f} "
           f"(worst at {rep.details.get('moment')}, "
           f"t={rep.details.get('time')})",
           time.time() - start, 180.0)


def test_criterion_08_ito_formula():
    start = time.time()
    grid = TimeGrid.from_dt(0, 1.0, 1e-3)
    ctrl = ClosedLoopControl.affine(0.1, -0.4)
    flow = lq_exact_flow(BASE_LQ, M0, ctrl, grid)
    model = BASE_LQ.dynamics()
    worst_ode = 0.0
    for F in (CylindricalFunction.total_mass(),
              CylindricalFunction.first_moment(),
              CylindricalFunction.squared_first_moment()):
        rep = ito_formula_check(F, model, ctrl, flow, (0.0, 1.0), 1e-6)
        worst_ode = max(worst_ode, rep.statistic)

    # halving on simulated flows: the O(dt) step bias dominates
    sim_model = affine_model_1d(-0.3, 0, 0, sigma=0.0, gamma=1.0,
                                progeny_probs=[0.15, 0.0, 0.85])
    nu0 = FiniteMeasure([[1.0]], [1.0])
    ratios = []
    for F in (CylindricalFunction.total_mass(),
              CylindricalFunction.first_moment()):
        residuals = []
        for dt in (0.1, 0.05):
            g = TimeGrid.from_dt(0, 1.0, dt)
            res = simulate_population(
                sim_model, ClosedLoopControl.zero(),
                MeasureFlow.constant(nu0, g.times), g, 400_000, 81, nu0)
            ts, mass, m1, m2 = res.moment_estimates()
            emp_flow = MeasureFlow.from_moments(ts, mass, m1, m2,
                                                "empirical")
            rep = ito_formula_check(F, sim_model, ClosedLoopControl.zero(),
                                    emp_flow, (0.0, 1.0), tol=np.inf)
            residuals.append(rep.statistic)
        ratios.append(residuals[0] / residuals[1])
    halving_ok = all(2 * 0.6 <= r <= 2 * 1.4 for r in ratios)
    passed = worst_ode < 1e-6 and halving_ok
    report(8, "ito-formula", passed,
           f"ODE-flow residual = {worst_ode:.2e}; halving ratios "
           f"{[f'{r:.2f}' for r in ratios]}",
           time.time() - start, 60.0)


def test_criterion_09_fokker_planck_crosscheck():
    start = time.time()
    model = affine_model_1d(-0.2, 0.0, 0.0, sigma=0.5, gamma=1.0,
                            progeny_probs=[0.3, 0.0, 0.7])
    law = GaussianLaw(mass=1.0, mean=0.0, sd=0.4)
    tgrid = TimeGrid.from_dt(0, 0.5, 5e-3)
    flow = MeasureFlow.constant(law.as_finite_measure(500, seed=9),
                                tgrid.times)
    coeffs = FrozenCoefficients.from_model(model, flow,
                                           ClosedLoopControl.zero())

    def distance(n_trees: int, dx: float) -> float:
        cells = int(round(8.0 / dx))
        dflow = fp_solve(coeffs, law.density, SpaceGrid(-4, 4, cells), tgrid)
        res = simulate_population(
            model, ClosedLoopControl.zero(), flow, tgrid, n_trees,
            rng.derive_seed(91, n_trees), law, scheme="bernoulli_residual",
            record=RecordOptions(snapshot_times=[0.5]),
        )
        emp = res.empirical_measure(0.5)
        unit = max(dflow.mass_trace[-1], emp.mass) / 2000
        fd_atoms = dflow.as_equal_weight_measure(0.5, unit_weight=unit)
        emp_atoms = equal_weight_atoms(emp.positions[:, 0], emp.weights,
                                       unit)
        return wbar1(fd_atoms, emp_atoms)

    coarse = distance(10_000, 0.01)
    fine = distance(40_000, 0.005)
    passed = coarse <= 0.05 and fine < coarse
    report(9, "fokker-planck-crosscheck", passed,
           f"wbar1 = {coarse:.4f} (N=1e4, dx=0.01) -> {fine:.4f} "
           f"(N=4e4, dx=0.005)",
           time.time() - start, 180.0)


def test_criterion_10_metric_unit_suite():
    start = time.time()
    checks = []
    # configuration distance
    e1 = Configuration([((1,), [0.3])])
    checks.append(config_distance(e1, e1) == 0.0)
    checks.append(config_distance(Configuration([((1,), [0.3])]),
                                  Configuration([((1,), [0.5])]))
                  == pytest.approx(0.2))
    checks.append(config_distance(Configuration([((1,), [0.0])]),
                                  Configuration([((2,), [0.0])])) == 2.0)
    checks.append(config_distance(
        Configuration([((1,), [0.0]), ((2,), [0.0])]),
        Configuration([((1,), [2.0])])) == 2.0)
    # transport distance
    d0 = FiniteMeasure.dirac([0.0])
    checks.append(wbar1(d0, d0) == 0.0)
    checks.append(wbar1(d0, FiniteMeasure.dirac([0.4]))
                  == pytest.approx(0.4))
    checks.append(wbar1(d0, FiniteMeasure.dirac([5.0]))
                  == pytest.approx(1.0))
    checks.append(wbar1(d0, FiniteMeasure.dirac([0.0], 2.0))
                  == pytest.approx(1.0))
    # offspring partition
    checks.append(sample_offspring(0.1, [0.25, 0.25, 0.5]) == 0)
    checks.append(sample_offspring(0.3, [0.25, 0.25, 0.5]) == 1)
    checks.append(sample_offspring(0.6, [0.25, 0.25, 0.5]) == 2)
    # moments
    checks.append(moments(FiniteMeasure.empty(1))[0] == 0.0)
    mass, m1, m2 = moments(FiniteMeasure.dirac([2.0], 3.0))
    checks.append((mass, m1[0], m2) == (3.0, 6.0, 12.0))
    mass, m1, m2 = moments(FiniteMeasure([[-1.0], [1.0]], [1.0, 1.0]))
    checks.append((mass, m1[0], m2) == (2.0, 0.0, 2.0))

    # padding-mass invariance at 1e-9
    rng_np = np.random.default_rng(10)
    pad_ok = True
    for _ in range(5):
        mu = FiniteMeasure(rng_np.normal(size=(5, 1)),
                           rng_np.uniform(0.2, 1, 5))
        nu = FiniteMeasure(rng_np.normal(size=(3, 1)),
                           rng_np.uniform(0.2, 1, 3))
        m = max(mu.mass, nu.mass)
        pad_ok &= abs(wbar1(mu, nu, padding_mass=m)
                      - wbar1(mu, nu, padding_mass=m + 5)) <= 1e-9
    checks.append(pad_ok)

    # metric axioms on 200 random triples
    axioms_ok = True
    for _ in range(200):
        sizes = rng_np.integers(1, 6, size=3)
        a, b, c = (FiniteMeasure(rng_np.normal(size=(s, 1)),
                                 np.full(s, 0.5)) for s in sizes)
        dab, dbc, dac = wbar1(a, b), wbar1(b, c), wbar1(a, c)
        axioms_ok &= dab >= -1e-12
        axioms_ok &= abs(dab - wbar1(b, a)) <= 1e-9
        axioms_ok &= dac <= dab + dbc + 1e-9
    checks.append(axioms_ok)

    passed = all(bool(c) for c in checks)
    report(10, "metric-unit-suite", passed,
           f"{len(checks)} exact/metric checks", time.time() - start, 30.0)


def test_criterion_11_riccati_order():
    start = time.time()
    model = lq_base([0.3, 0.2, 0.5], b3=2.0, L1=2.0, g1=1.5)
    vals = {}
    for n in (100, 200, 400):  # dt = 1e-2, 5e-3, 2.5e-3
        vals[n] = solve_riccati(model, n).values[0]
    e1 = np.max(np.abs(vals[100] - vals[200]))
    e2 = np.max(np.abs(vals[200] - vals[400]))
    order = math.log2(e1 / e2)
    report(11, "riccati-order", order >= 3.5,
           f"observed self-convergence order = {order:.2f}",
           time.time() - start, 5.0)


def test_criterion_12_dpp_panel():
    start = time.time()
    sol = solve_riccati(BASE_LQ, 2000)
    seeded = np.random.default_rng(12)
    panel = [tuple(seeded.normal(scale=0.6, size=2)) for _ in range(20)]
    worst = 0.0
    for t, s in ((0.0, 0.5), (0.2, 0.7), (0.1, 1.0)):
        rep = check_dpp(BASE_LQ, M0, t, s, panel, tol=1e-6, sol=sol)
        worst = max(worst, rep.statistic)
        assert rep.passed
    report(12, "dpp-panel", worst <= 1e-6,
           f"max two-sided gap = {worst:.3e} over 3 (t, s) pairs",
           time.time() - start, 10.0)
