"""Certification harness: numerical checks of the structural identities.

Each check runs simulations and/or closed-form machinery, produces one
:class:`CheckReport` with a scalar statistic, its threshold and a pass flag,
and never aborts the remaining checks when it fails -- the suite runner
collects reports and writes a machine-readable summary.

Deterministic-oracle checks (dynamic programming, verification equality)
run at absolute tolerance 1e-6 by default; stochastic checks compare
against 3 standard errors.  Both are configurable per call.
"""

from __future__ import annotations

import json
import math
import traceback
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .cost import CostEstimate, estimate_cost, lq_cost_spec
from .engine.simulate import RecordOptions, simulate_population
from .flows import MeasureFlow
from .lq import (LQModel, Moments, RiccatiSolution, lq_cost_ode,
                 lq_moment_flow, lq_running_segment, lq_value,
                 optimal_affine_coefficients, optimal_control_feedback,
                 solve_riccati)
from .measures import FiniteMeasure
from .model import ClosedLoopControl, ModelCoefficients
from .timegrid import TimeGrid


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one certification check."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    n_samples: int = 0
    config_hash: str = ""
    details: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "passed": bool(self.passed),
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "details": self.details,
        }


@dataclass(frozen=True)
class TestFunction:
    """Twice-differentiable scalar test function with explicit derivatives."""

    value: Callable[[np.ndarray], np.ndarray]          # (n, d) -> (n,)
    gradient: Callable[[np.ndarray], np.ndarray]       # (n, d) -> (n, d)
    hessian: Callable[[np.ndarray], np.ndarray]        # (n, d) -> (n, d, d)


def _const_fn(c: float) -> TestFunction:
    return TestFunction(
        lambda x: np.full(np.atleast_2d(x).shape[0], c),
        lambda x: np.zeros(np.atleast_2d(x).shape),
        lambda x: np.zeros(np.atleast_2d(x).shape + (np.atleast_2d(x).shape[1],)),
    )


def _coordinate_fn(i: int = 0) -> TestFunction:
    def grad(x):
        x = np.atleast_2d(x)
        g = np.zeros_like(x)
        g[:, i] = 1.0
        return g

    return TestFunction(
        lambda x: np.atleast_2d(x)[:, i].copy(),
        grad,
        lambda x: np.zeros(np.atleast_2d(x).shape + (np.atleast_2d(x).shape[1],)),
    )


@dataclass(frozen=True)
class CylindricalFunction:
    """F(m) = outer(<m, phi_1>, ..., <m, phi_k>) with derivatives assembled
    from the chain rule:

        dF/dm (m, x)         = sum_i d_i outer * phi_i(x)
        intrinsic derivative = sum_i d_i outer * grad phi_i(x)
        its spatial Jacobian = sum_i d_i outer * hess phi_i(x)
    """

    outer: Callable[[np.ndarray], float]
    outer_grad: Callable[[np.ndarray], np.ndarray]
    inner: tuple[TestFunction, ...]

    def __post_init__(self):
        # quadratic growth guard on the inner functions
        xs = np.linspace(-8, 8, 9).reshape(-1, 1)
        for j, fn in enumerate(self.inner):
            vals = np.abs(np.asarray(fn.value(xs)))
            if np.any(vals > 1e6 * (1 + xs[:, 0] ** 2)):
                raise ValueError(f"inner function #{j} grows faster than x^2")

    def _integrals(self, m: FiniteMeasure) -> np.ndarray:
        return np.array([m.integrate(fn.value) for fn in self.inner])

    def evaluate(self, m: FiniteMeasure) -> float:
        return float(self.outer(self._integrals(m)))

    def linear_derivative(self, m: FiniteMeasure, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.outer_grad(self._integrals(m)), dtype=float)
        vals = np.stack([fn.value(x) for fn in self.inner], axis=0)
        return g @ vals

    def intrinsic_derivative(self, m: FiniteMeasure, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.outer_grad(self._integrals(m)), dtype=float)
        grads = np.stack([fn.gradient(x) for fn in self.inner], axis=0)
        return np.tensordot(g, grads, axes=1)

    def intrinsic_jacobian(self, m: FiniteMeasure, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.outer_grad(self._integrals(m)), dtype=float)
        hess = np.stack([fn.hessian(x) for fn in self.inner], axis=0)
        return np.tensordot(g, hess, axes=1)

    # -- stock functionals ----------------------------------------------------

    @classmethod
    def total_mass(cls) -> "CylindricalFunction":
        return cls(lambda v: float(v[0]), lambda v: np.ones(1),
                   (_const_fn(1.0),))

    @classmethod
    def first_moment(cls) -> "CylindricalFunction":
        return cls(lambda v: float(v[0]), lambda v: np.ones(1),
                   (_coordinate_fn(0),))

    @classmethod
    def squared_first_moment(cls) -> "CylindricalFunction":
        return cls(lambda v: float(v[0]) ** 2,
                   lambda v: np.array([2.0 * v[0]]),
                   (_coordinate_fn(0),))


def generator_integral(F: CylindricalFunction, model: ModelCoefficients,
                       control: ClosedLoopControl, mu: FiniteMeasure,
                       t: float) -> float:
    """<G^alpha F, mu>: transport + diffusion + branching source applied to
    the cylindrical functional, integrated against the measure."""
    if mu.n_atoms == 0:
        return 0.0
    x = mu.positions
    w = mu.weights
    a = control.values(t, x)
    bv = np.atleast_2d(np.asarray(model.b(t, x, mu, a), dtype=float))
    dmu = F.intrinsic_derivative(mu, x)
    transport = float(w @ np.sum(bv * dmu, axis=1))

    smat = model.sigma_matrix(t, x, mu, a)
    jac = F.intrinsic_jacobian(mu, x)
    sig_sq = np.einsum("aij,akj->aik", smat, smat)
    diffusion = 0.5 * float(w @ np.einsum("aii->a", np.einsum(
        "aij,ajk->aik", sig_sq, jac)))

    gam = model.gamma_values(t, x, mu, a)
    probs = model.progeny.probabilities(t, x, mu, a)
    ell = np.arange(probs.shape[1])
    shift = gam * (probs @ (ell - 1.0))
    lin = F.linear_derivative(mu, x)
    branching = float(w @ (shift * lin))
    return transport + diffusion + branching


def ito_formula_check(F: CylindricalFunction, model: ModelCoefficients,
                      control: ClosedLoopControl, flow: MeasureFlow,
                      interval: tuple[float, float], tol: float,
                      name: str = "ito_formula") -> CheckReport:
    """Residual of the chain-rule identity along the flow:
    |F(mu_s) - F(mu_t) - int_t^s <G F, mu_u> du| with trapezoid quadrature
    on the flow grid."""
    t, s = interval
    i0, i1 = flow.index_of(t), flow.index_of(s)
    if i1 <= i0:
        raise ValueError("need t < s on the flow grid")
    times = flow.times[i0:i1 + 1]
    values = np.array([
        generator_integral(F, model, control, flow.measures[i0 + k],
                           float(u))
        for k, u in enumerate(times)
    ])
    integral = float(np.trapezoid(values, times))
    gap = F.evaluate(flow.measures[i1]) - F.evaluate(flow.measures[i0])
    statistic = abs(gap - integral)
    return CheckReport(
        name=name, statistic=statistic, threshold=tol,
        passed=bool(statistic <= tol),
        n_samples=times.size,
        details={"gap": gap, "integral": integral},
    )


def check_population_bound(model: ModelCoefficients,
                           control: ClosedLoopControl, nu0, grid: TimeGrid,
                           n_trees: int, rng_seed: int, m1_bound: float,
                           scheme: str = "deterministic_rounding",
                           flow: MeasureFlow | None = None,
                           name: str = "population_bound") -> CheckReport:
    """Mean running maximum of the alive count against the exponential
    domination mass * exp(gamma_bar * M1 * (T - t0)) + 3 SE."""
    if n_trees < 10_000:
        raise ValueError("population bound check needs at least 10^4 trees")
    from .engine.initial import as_initial_law

    law = as_initial_law(nu0)
    if flow is None:
        flow = MeasureFlow.constant(law.as_finite_measure(200, seed=rng_seed),
                                    grid.times)
    result = simulate_population(
        model, control, flow, grid, n_trees, rng_seed, nu0, scheme=scheme,
        record=RecordOptions(sup_counts=True),
    )
    sup = result.sup_counts
    statistic = float(sup.mean())
    se = float(sup.std(ddof=1) / math.sqrt(n_trees))
    bound = law.mass * math.exp(
        model.gamma_bar * m1_bound * (grid.t_end - grid.t0)
    )
    return CheckReport(
        name=name, statistic=statistic, threshold=bound + 3 * se,
        passed=bool(statistic <= bound + 3 * se), n_samples=n_trees,
        details={"bound": bound, "standard_error": se},
    )


def check_mass_law(model: ModelCoefficients, control: ClosedLoopControl,
                   nu0, grid: TimeGrid, n_trees: int, rng_seed: int,
                   theta: float, flow: MeasureFlow | None = None,
                   scheme: str = "deterministic_rounding",
                   name: str = "mass_law") -> CheckReport:
    """Empirical mass ratio at the horizon against exp(theta (T - t0))."""
    from .engine.initial import as_initial_law

    law = as_initial_law(nu0)
    if flow is None:
        flow = MeasureFlow.constant(law.as_finite_measure(200, seed=rng_seed),
                                    grid.times)
    result = simulate_population(
        model, control, flow, grid, n_trees, rng_seed, nu0, scheme=scheme,
        record=RecordOptions(per_tree_moment_times=[grid.t_end]),
    )
    mass0 = law.mass
    ratio = result.total_counts[-1] / n_trees / mass0
    target = math.exp(theta * (grid.t_end - grid.t0))
    se = float(result.tree_counts[0].std(ddof=1) / math.sqrt(n_trees)) / mass0
    statistic = abs(ratio - target)
    return CheckReport(
        name=name, statistic=statistic, threshold=3 * se,
        passed=bool(statistic <= 3 * se), n_samples=n_trees,
        details={"ratio": float(ratio), "target": target,
                 "standard_error": se},
    )


def check_dpp(lq_model: LQModel, m0: Moments, t: float, s: float,
              panel: Sequence[tuple], tol: float = 1e-6,
              sol: RiccatiSolution | None = None,
              n_steps: int = 2000, name: str = "dpp") -> CheckReport:
    """Two-sided dynamic programming test on an affine control panel.

    lhs = w(t, m0); for each control, rhs = running segment cost on [t, s]
    plus w(s, flowed moments).  Requires lhs <= min rhs + tol and
    lhs >= rhs(optimal feedback) - tol.
    """
    if not lq_model.t0 <= t <= s <= lq_model.horizon:
        raise ValueError("need t0 <= t <= s <= horizon")
    sol = sol or solve_riccati(lq_model, n_steps)
    lhs = lq_value(sol, t, m0)
    if s == t:
        return CheckReport(name=name, statistic=0.0, threshold=tol,
                           passed=True, details={"lhs": lhs, "rhs_min": lhs,
                                                 "degenerate": True})

    def cost_to_go(control) -> float:
        seg, m_s = lq_running_segment(lq_model, control, t, m0, s, n_steps)
        return seg + lq_value(sol, s, m_s)

    opt = optimal_affine_coefficients(sol, t, m0.mass)
    rhs_opt = cost_to_go(opt)
    rhs_values = [cost_to_go(ctrl) for ctrl in panel] + [rhs_opt]
    rhs_min = min(rhs_values)
    gap_upper = lhs - rhs_min          # must be <= tol
    gap_optimal = abs(lhs - rhs_opt)   # must be <= tol
    statistic = max(gap_upper, gap_optimal)
    return CheckReport(
        name=name, statistic=float(statistic), threshold=tol,
        passed=bool(statistic <= tol), n_samples=len(panel) + 1,
        details={"lhs": lhs, "rhs_min": rhs_min, "rhs_optimal": rhs_opt},
    )


def check_verification(lq_model: LQModel, m0: Moments,
                       perturbations: Sequence[tuple[float, float]],
                       tol: float = 1e-6,
                       sol: RiccatiSolution | None = None,
                       n_steps: int = 2000,
                       mc: dict | None = None,
                       name: str = "verification") -> CheckReport:
    """Deterministic verification: policy evaluation of the closed-form
    feedback equals the candidate value, and every perturbed affine feedback
    costs at least value - tol.  Optional Monte Carlo confirmation within
    3 SE (pass ``mc`` = dict(grid=..., n_trees=..., seed=...))."""
    sol = sol or solve_riccati(lq_model, n_steps)
    w0 = lq_value(sol, lq_model.t0, m0)
    k0, k1 = optimal_affine_coefficients(sol, lq_model.t0, m0.mass)
    cost_opt = lq_cost_ode(lq_model, (k0, k1), lq_model.t0, m0, n_steps)
    equality_gap = abs(cost_opt - w0)

    worst_suboptimality = 0.0
    for dk0, dk1 in perturbations:
        pert = (lambda u, d=dk0: k0(u) + d, lambda u, d=dk1: k1(u) + d)
        cost_p = lq_cost_ode(lq_model, pert, lq_model.t0, m0, n_steps)
        worst_suboptimality = max(worst_suboptimality, w0 - cost_p)

    statistic = max(equality_gap, worst_suboptimality)
    details = {"value": w0, "cost_optimal": cost_opt,
               "worst_value_minus_cost": worst_suboptimality}
    passed = statistic <= tol

    if mc is not None:
        est = mc_cost_of_optimal_control(lq_model, m0, sol=sol, **mc)
        z = abs(est.mean - w0) / est.std_error if est.std_error else math.inf
        details.update({"mc_mean": est.mean, "mc_se": est.std_error,
                        "mc_z": z})
        passed = passed and z <= 3.0
    return CheckReport(
        name=name, statistic=float(statistic), threshold=tol,
        passed=bool(passed), n_samples=len(perturbations),
        details=details,
    )


def lq_exact_flow(lq_model: LQModel, m0: Moments, control,
                  grid: TimeGrid) -> MeasureFlow:
    """Moment-ODE flow of an LQ model as a measure flow (two-atom moment
    matching, exact for coefficients reading only mass and mean)."""
    mf = lq_moment_flow(lq_model, control, grid.t0, m0,
                        n_steps=grid.n_steps, t_end=grid.t_end)
    return MeasureFlow.from_moments(mf.times, mf.mass, mf.m1, mf.m2)


def mc_cost_of_optimal_control(lq_model: LQModel, m0: Moments,
                               grid: TimeGrid, n_trees: int, seed: int,
                               sol: RiccatiSolution | None = None,
                               scheme: str = "deterministic_rounding",
                               nu0=None) -> CostEstimate:
    """Monte Carlo cost of the closed-form optimal feedback, simulated
    against the exact moment flow."""
    sol = sol or solve_riccati(lq_model)
    control = optimal_control_feedback(sol, lq_model.t0, m0.mass)
    flow = lq_exact_flow(lq_model, m0, control, grid)
    if nu0 is None:
        sd = math.sqrt(max(m0.m2 / m0.mass - (m0.m1 / m0.mass) ** 2, 0.0))
        from .engine.initial import GaussianLaw

        nu0 = GaussianLaw(mass=m0.mass, mean=m0.m1 / m0.mass, sd=sd)
    return estimate_cost(
        lq_model.dynamics(), lq_cost_spec(lq_model), control, nu0, grid,
        n_trees, seed, flow=flow, scheme=scheme,
    )


def check_hjb_grid(lq_model: LQModel, n_points: int = 1000,
                   tol: float = 1e-6, convention: str = "theta_explicit",
                   riccati_steps: int = 2000, mass_max: float = 5.0,
                   mean_max: float = 5.0, name: str = "hjb_residual",
                   ) -> CheckReport:
    """Max |Bellman residual| of the solved coefficient system over a
    deterministic grid of (t, mass, m1) states with Cauchy-Schwarz
    compatible second moments."""
    from .lq import hjb_residual

    sol = solve_riccati(lq_model, riccati_steps, convention)
    n_side = max(int(round(n_points ** (1 / 3))), 2)
    ts = np.linspace(lq_model.t0, lq_model.horizon - 1e-9, n_side)
    masses = np.linspace(0.25, mass_max, n_side)
    means = np.linspace(-mean_max, mean_max, n_side)
    worst = 0.0
    worst_at = {}
    count = 0
    for t in ts:
        for mb in masses:
            for mean in means:
                m1 = mb * mean / max(mean_max, 1.0)
                m2 = m1**2 / mb + 0.5 * mb  # strict Cauchy-Schwarz slack
                r = abs(hjb_residual(sol, float(t), Moments(mb, m1, m2)))
                count += 1
                if r > worst:
                    worst = r
                    worst_at = {"t": float(t), "mass": float(mb),
                                "m1": float(m1), "m2": float(m2)}
    return CheckReport(
        name=name, statistic=float(worst), threshold=tol,
        passed=bool(worst <= tol), n_samples=count,
        details={"convention": convention, "worst_at": worst_at},
    )


def check_flow_property(model: ModelCoefficients, control: ClosedLoopControl,
                        nu0, grid: TimeGrid, n_trees: int, rng_seed: int,
                        u: float | None = None,
                        picard_tol: float = 0.05, max_iter: int = 6,
                        name: str = "flow_property") -> CheckReport:
    """Restart the flow at an intermediate time and compare moments at the
    horizon; statistic is the largest standardized difference."""
    from .meanfield import flow_property_check

    t, s = grid.t0, grid.t_end
    if u is None:
        u = grid.times[grid.n_steps // 2]
    report = flow_property_check(model, control, nu0, grid, t, u, s,
                                 n_trees, rng_seed, picard_tol, max_iter)
    z = max(
        (d / se if se > 0 else (0.0 if d == 0 else math.inf))
        for d, se in zip(report.moment_difference, report.moment_se)
    )
    return CheckReport(
        name=name, statistic=float(z), threshold=3.0, passed=bool(z <= 3.0),
        n_samples=n_trees,
        details={"restart_time": u, "wbar1_at_horizon": report.wbar1_at_s,
                 "moment_difference": list(report.moment_difference),
                 "moment_se": list(report.moment_se)},
    )


def check_initial_law_invariance(model: ModelCoefficients,
                                 control: ClosedLoopControl, nu0,
                                 schemes: tuple[str, str], grid: TimeGrid,
                                 n_trees: int, rng_seed: int,
                                 flow: MeasureFlow | None = None,
                                 picard: dict | None = None,
                                 name: str = "initial_law_invariance",
                                 ) -> CheckReport:
    """Flows induced by two liftings of the same initial measure must agree:
    statistic = max over grid times and moments of the standardized
    difference, threshold 3."""
    from .meanfield import solve_flow_picard

    results = []
    for i, scheme in enumerate(schemes):
        seed = rng.derive_seed(rng_seed, 17 + i)
        use_flow = flow
        if use_flow is None:
            opts = {"n_trees": n_trees, "tol": 0.0, "max_iter": 3}
            opts.update(picard or {})
            use_flow, _ = solve_flow_picard(model, control, nu0, grid,
                                            rng_seed=seed, scheme=scheme,
                                            **opts)
        results.append(simulate_population(
            model, control, use_flow, grid, n_trees,
            rng.derive_seed(seed, 1), nu0, scheme=scheme,
            record=RecordOptions(per_tree_moment_times="all"),
        ))

    def stacks(res):
        return (res.tree_counts.astype(float), res.tree_sum_x,
                res.tree_sum_sq)

    worst = 0.0
    worst_detail = {}
    for m_idx, label in enumerate(("mass", "m1", "m2")):
        a = stacks(results[0])[m_idx]
        b = stacks(results[1])[m_idx]
        diff = np.abs(a.mean(axis=1) - b.mean(axis=1))
        se = np.sqrt(a.var(axis=1, ddof=1) / a.shape[1]
                     + b.var(axis=1, ddof=1) / b.shape[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(diff > 0, diff / np.maximum(se, 1e-300), 0.0)
        k = int(np.argmax(z))
        if z[k] > worst:
            worst = float(z[k])
            worst_detail = {"moment": label,
                            "time": float(grid.times[k]),
                            "difference": float(diff[k]),
                            "standard_error": float(se[k])}
    return CheckReport(
        name=name, statistic=worst, threshold=3.0,
        passed=bool(worst <= 3.0), n_samples=n_trees, details=worst_detail,
    )


def run_suite(checks: Sequence[tuple[str, Callable[[], CheckReport]]],
              config_hash: str = "") -> list[CheckReport]:
    """Run every check, catching failures; reports sorted by name."""
    reports = []
    for check_name, thunk in checks:
        try:
            report = thunk()
        except Exception as exc:  # a failed check never aborts the suite
            report = CheckReport(
                name=check_name, statistic=math.nan, threshold=math.nan,
                passed=False,
                details={"error": f"{type(exc).__name__}: {exc}",
                         "traceback": traceback.format_exc(limit=3)},
            )
        if config_hash and not report.config_hash:
            report = CheckReport(**{**report.to_dict(),
                                    "config_hash": config_hash,
                                    "details": report.details})
        reports.append(report)
    return sorted(reports, key=lambda r: r.name)


def suite_summary(reports: Sequence[CheckReport]) -> dict:
    return {
        "n_checks": len(reports),
        "n_passed": sum(r.passed for r in reports),
        "all_passed": all(r.passed for r in reports),
        "checks": [r.to_dict() for r in reports],
    }


def write_summary(reports: Sequence[CheckReport], path) -> None:
    with open(path, "w") as fh:
        json.dump(suite_summary(reports), fh, indent=2, sort_keys=True)
