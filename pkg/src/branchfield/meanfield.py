"""Mean-field fixed point: find the measure flow that reproduces itself.

The interaction term of the branching system is the deterministic flow of
mean measures of the alive population.  Freezing a candidate flow turns the
system into independent trees; simulating N of them and averaging induces a
new flow.  ``solve_flow_picard`` iterates this map from a mass-growth-scaled
initial guess until the sup-over-time extended Wasserstein residual between
consecutive iterates drops below tolerance (residuals are computed on
subsampled atoms; the flow itself keeps every atom).

``flow_property_check`` restarts the solved flow from an intermediate time
and reports how far the restarted flow lands from the original at the final
time -- a direct numerical probe of the semigroup property that underpins
dynamic programming.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from . import rng
from .engine.initial import as_initial_law
from .engine.simulate import RecordOptions, simulate_population
from .flows import MeasureFlow
from .measures import FiniteMeasure, equal_weight_atoms, wbar1_subsampled
from .model import ClosedLoopControl, ModelCoefficients
from .timegrid import TimeGrid


@dataclass
class PicardDiagnostics:
    """Convergence record of the fixed-point iteration."""

    residuals: list[float] = field(default_factory=list)
    moment_residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    n_trees: int = 0
    tolerance: float = 0.0


def _estimate_theta(model: ModelCoefficients, control: ClosedLoopControl,
                    t0: float, nu0_measure: FiniteMeasure) -> float:
    """Mass growth rate of the progeny mechanism at the initial state."""
    if nu0_measure.n_atoms == 0:
        return 0.0
    mass, m1, _ = nu0_measure.moments()
    x = (m1 / mass).reshape(1, -1)
    a = control.values(t0, x)
    gam = model.gamma_values(t0, x, nu0_measure, a)
    probs = model.progeny.probabilities(t0, x, nu0_measure, a)
    ell = np.arange(probs.shape[1])
    return float(gam[0] * ((ell - 1) @ probs[0]))


def _initial_guess(model, control, grid: TimeGrid, nu0,
                   n_trees: int, seed: int) -> MeasureFlow:
    """Mass-scaled constant-shape guess with atom weight exactly 1/N so the
    whole iteration stays on the assignment-based transport fast path."""
    law = as_initial_law(nu0)
    n0 = max(int(round(law.mass * n_trees)), 1)
    seed_pool = rng.derive_seed(seed, 991)
    zeros = np.zeros(min(n0, 500), dtype=np.int64)
    probe_pos = law.sample_positions(seed_pool, zeros,
                                     np.arange(zeros.size, dtype=np.int64))
    probe = FiniteMeasure(probe_pos, np.full(zeros.size, law.mass / zeros.size))
    theta_hat = _estimate_theta(model, control, grid.t0, probe)
    span = grid.t_end - grid.t0
    growth = math.exp(max(theta_hat, 0.0) * span)
    n_max = max(int(math.ceil(n0 * growth)), n0, 1)
    pool = law.sample_positions(
        seed_pool, np.zeros(n_max, dtype=np.int64),
        np.arange(n_max, dtype=np.int64),
    )
    # scale mass by atom count at fixed weight 1/N: keeps every flow in the
    # iteration on the assignment-based transport fast path
    dim = pool.shape[1]
    measures = []
    for t in grid.times:
        n_t = max(int(round(n0 * math.exp(theta_hat * (t - grid.t0)))), 0)
        n_t = min(n_t, n_max)
        measures.append(FiniteMeasure(
            pool[:n_t], np.full(n_t, 1.0 / n_trees), dim
        ))
    return MeasureFlow(grid.times, tuple(measures), "initial_guess")


def _blend(old: FiniteMeasure, new: FiniteMeasure, damping: float) -> FiniteMeasure:
    if damping >= 1.0:
        return new
    return FiniteMeasure(
        np.vstack([old.positions, new.positions]),
        np.concatenate([(1 - damping) * old.weights, damping * new.weights]),
        new.dimension if new.n_atoms else old.dimension,
    )


def solve_flow_picard(model: ModelCoefficients, control: ClosedLoopControl,
                      nu0, grid: TimeGrid, n_trees: int, tol: float,
                      max_iter: int, rng_seed: int,
                      scheme: str = "bernoulli_residual",
                      damping: float = 1.0,
                      residual_atom_cap: int = 500,
                      ) -> tuple[MeasureFlow, PicardDiagnostics]:
    """Fixed-point iteration on the measure flow.

    Each sweep re-simulates ``n_trees`` trees against the previous flow with
    a fresh substream and replaces the flow by the empirical mean measures.
    Returns the first iterate whose residual (sup over grid times of the
    extended Wasserstein distance between consecutive iterates, atoms
    subsampled to ``residual_atom_cap``) is below ``tol``; if ``max_iter``
    sweeps do not get there, the last iterate is returned with
    ``converged=False``.
    """
    if n_trees < 100:
        raise ValueError("need at least 100 trees per sweep")
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    diag = PicardDiagnostics(n_trees=n_trees, tolerance=tol)
    flow = _initial_guess(model, control, grid, nu0, n_trees, rng_seed)

    for it in range(1, max_iter + 1):
        seed_it = rng.derive_seed(rng_seed, it)
        result = simulate_population(
            model, control, flow, grid, n_trees, seed_it, nu0, scheme=scheme,
            record=RecordOptions(snapshot_times="all"),
        )
        new_flow = result.flow(provenance=f"picard_sweep_{it}")
        if damping < 1.0:
            measures = tuple(
                _blend(mo, mn, damping)
                for mo, mn in zip(flow.measures, new_flow.measures)
            )
            new_flow = MeasureFlow(grid.times, measures, new_flow.provenance)

        def residual_measure(m: FiniteMeasure) -> FiniteMeasure:
            # damped blends mix two weight levels; resample to the common
            # 1/N grain (1D quantiles) so the residual stays on the
            # assignment fast path; the flow itself keeps the full atoms
            if damping >= 1.0 or m.n_atoms == 0 or m.dimension != 1:
                return m
            return equal_weight_atoms(m.positions[:, 0], m.weights,
                                      1.0 / n_trees)

        residual = max(
            wbar1_subsampled(residual_measure(mo), residual_measure(mn),
                             cap=residual_atom_cap)
            for mo, mn in zip(flow.measures, new_flow.measures)
        )
        old_mom = np.column_stack(flow.moment_arrays()[1:])
        new_mom = np.column_stack(new_flow.moment_arrays()[1:])
        diag.residuals.append(float(residual))
        diag.moment_residuals.append(float(np.abs(old_mom - new_mom).max()))
        diag.iterations = it
        flow = new_flow
        if residual < tol:
            diag.converged = True
            break
    return flow, diag


def solve_flow_fd(model: ModelCoefficients, control: ClosedLoopControl,
                  nu0, grid: TimeGrid, x_lo: float, x_hi: float,
                  n_cells: int, atoms_per_time: int = 400) -> MeasureFlow:
    """Deterministic flow via the density equation with live coefficients.

    One-dimensional alternative to the simulation fixed point: march the
    density forward, evaluating the coefficients at the measure induced by
    the current density (explicit in the interaction).  Requires an initial
    law with a density.  Returns equal-weight atom measures per grid time,
    provenance ``fd_solver``.
    """
    from .fokker_planck import SpaceGrid, fp_solve, FrozenCoefficients

    if model.dimension != 1:
        raise ValueError("the density engine is one-dimensional")
    law = as_initial_law(nu0)
    if not hasattr(law, "density"):
        raise ValueError("the density engine needs an initial law with a "
                         "density")
    sgrid = SpaceGrid(x_lo, x_hi, n_cells)
    centers = sgrid.centers.reshape(-1, 1)
    state = {"measure": None}

    def live_measure(t: float) -> FiniteMeasure:
        return state["measure"]

    def drift(t, x):
        mu = live_measure(t)
        xs = np.asarray(x, dtype=float).reshape(-1, 1)
        a = control.values(t, xs)
        return np.atleast_2d(model.b(t, xs, mu, a))[:, 0]

    def diffusivity(t, x):
        mu = live_measure(t)
        xs = np.asarray(x, dtype=float).reshape(-1, 1)
        a = control.values(t, xs)
        return 0.5 * model.sigma_matrix(t, xs, mu, a)[:, 0, 0] ** 2

    def source(t, x):
        mu = live_measure(t)
        xs = np.asarray(x, dtype=float).reshape(-1, 1)
        a = control.values(t, xs)
        gam = model.gamma_values(t, xs, mu, a)
        probs = model.progeny.probabilities(t, xs, mu, a)
        ell = np.arange(probs.shape[1])
        return gam * (probs @ (ell - 1))

    coeffs = FrozenCoefficients(drift, diffusivity, source)
    rho = law.density(sgrid.centers)
    measures = []
    for j, t in enumerate(grid.times[:-1]):
        mu_j = FiniteMeasure(centers, np.maximum(rho, 0.0) * sgrid.dx, 1)
        state["measure"] = mu_j
        measures.append(equal_weight_atoms(
            sgrid.centers, np.maximum(rho, 0.0) * sgrid.dx,
            unit_weight=max(mu_j.mass, 1e-12) / atoms_per_time,
        ))
        step = fp_solve(coeffs, rho, sgrid,
                        TimeGrid(t, t + grid.dt, 1))
        rho = step.densities[-1]
    mu_end = FiniteMeasure(centers, np.maximum(rho, 0.0) * sgrid.dx, 1)
    state["measure"] = mu_end
    measures.append(equal_weight_atoms(
        sgrid.centers, np.maximum(rho, 0.0) * sgrid.dx,
        unit_weight=max(mu_end.mass, 1e-12) / atoms_per_time,
    ))
    return MeasureFlow(grid.times, tuple(measures), "fd_solver")


def residual_noise_floor(model: ModelCoefficients, control: ClosedLoopControl,
                         nu0, grid: TimeGrid, n_trees: int, rng_seed: int,
                         flow: MeasureFlow | None = None,
                         scheme: str = "bernoulli_residual",
                         residual_atom_cap: int = 500,
                         n_pairs: int = 2) -> tuple[float, float]:
    """Monte Carlo floor of the fixed-point residual: the sup-over-grid
    distance between independent N-tree estimates of the same flow.

    Returns (mean, spread) over ``n_pairs`` independent pairs; a converged
    iteration cannot be expected to go below this level.
    """
    if flow is None:
        flow = _initial_guess(model, control, grid, nu0, n_trees, rng_seed)
    values = []
    for p in range(n_pairs):
        flows = []
        for half in range(2):
            seed = rng.derive_seed(rng_seed, 7000 + 2 * p + half)
            result = simulate_population(
                model, control, flow, grid, n_trees, seed, nu0, scheme=scheme,
                record=RecordOptions(snapshot_times="all"),
            )
            flows.append(result.flow())
        values.append(max(
            wbar1_subsampled(a, b, cap=residual_atom_cap)
            for a, b in zip(flows[0].measures, flows[1].measures)
        ))
    arr = np.asarray(values)
    spread = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), spread


@dataclass(frozen=True)
class FlowDiscrepancyReport:
    """Distances between a flow and its restart from an intermediate time."""

    t: float
    u: float
    s: float
    wbar1_at_s: float
    moment_difference: tuple[float, float, float]
    moment_se: tuple[float, float, float]
    n_trees: int


def flow_property_check(model: ModelCoefficients, control: ClosedLoopControl,
                        nu0, grid: TimeGrid, t: float, u: float, s: float,
                        n_trees: int, rng_seed: int,
                        picard_tol: float = 0.05, max_iter: int = 8,
                        residual_atom_cap: int = 500) -> FlowDiscrepancyReport:
    """Solve the flow from (t, nu0) to s, restart it at u from the flowed
    measure, and report the distance of the two flows at s.

    Degenerate inputs t = u = s report zero.  Thresholds are the caller's
    business; this only measures.
    """
    for name, val in (("t", t), ("u", u), ("s", s)):
        grid.index_of(val)  # raises if off-grid
    if not t <= u <= s:
        raise ValueError("need t <= u <= s")
    if t == s:
        return FlowDiscrepancyReport(t, u, s, 0.0, (0.0,) * 3, (0.0,) * 3,
                                     n_trees)

    grid_a = grid.restricted(t, s)
    flow_a, _ = solve_flow_picard(
        model, control, nu0, grid_a, n_trees, picard_tol, max_iter, rng_seed,
        residual_atom_cap=residual_atom_cap,
    )
    mu_at_u = flow_a.measure_at(u)
    if u == s:
        zero = (0.0, 0.0, 0.0)
        return FlowDiscrepancyReport(t, u, s, 0.0, zero, zero, n_trees)

    grid_b = grid.restricted(u, s)
    flow_b, _ = solve_flow_picard(
        model, control, mu_at_u, grid_b, n_trees, picard_tol, max_iter,
        rng.derive_seed(rng_seed, 7919), residual_atom_cap=residual_atom_cap,
    )

    # fresh evaluation runs against the two converged flows, with per-tree
    # moments at s for honest standard errors
    est_a = evaluate_flow_moments(model, control, nu0, grid_a, flow_a,
                                  n_trees, rng.derive_seed(rng_seed, 104729),
                                  at=s)
    est_b = evaluate_flow_moments(model, control, mu_at_u, grid_b, flow_b,
                                  n_trees, rng.derive_seed(rng_seed, 104730),
                                  at=s)
    dist = wbar1_subsampled(est_a.measure, est_b.measure,
                            cap=residual_atom_cap)
    diff = tuple(float(abs(a - b)) for a, b in zip(est_a.moments, est_b.moments))
    ses = tuple(
        float(math.sqrt(sa**2 + sb**2))
        for sa, sb in zip(est_a.standard_errors, est_b.standard_errors)
    )
    return FlowDiscrepancyReport(t, u, s, float(dist), diff, ses, n_trees)


@dataclass(frozen=True)
class MomentEstimate:
    """Empirical mean-measure moments at one time with standard errors."""

    time: float
    measure: FiniteMeasure
    moments: tuple[float, float, float]
    standard_errors: tuple[float, float, float]


def evaluate_flow_moments(model, control, nu0, grid: TimeGrid,
                          flow: MeasureFlow, n_trees: int, seed: int,
                          at: float,
                          scheme: str = "bernoulli_residual") -> MomentEstimate:
    """Simulate against a frozen flow and estimate the mean-measure moments
    at one grid time, with per-tree standard errors."""
    result = simulate_population(
        model, control, flow, grid, n_trees, seed, nu0, scheme=scheme,
        record=RecordOptions(snapshot_times=[at], per_tree_moment_times=[at]),
    )
    measure = result.empirical_measure(at)
    mass, m1, m2 = measure.moments()
    _, se_mass, se_m1, se_m2 = result.moment_standard_errors()
    return MomentEstimate(
        at, measure, (mass, float(m1[0]) if m1.size else 0.0, m2),
        (float(se_mass[0]), float(se_m1[0]), float(se_m2[0])),
    )
