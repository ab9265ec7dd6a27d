"""Simulation of controlled branching particle trees against a frozen flow.

Per step, every alive particle takes an Euler-Maruyama move, then runs a
dominated-thinning death clock: a candidate event fires with probability
1 - exp(-gamma_bar * dt) and is accepted with probability gamma / gamma_bar,
in which case the particle is replaced in place by its offspring (count
drawn from the progeny law) at the parent's moved position.  Coefficients
are evaluated explicitly at the step's left endpoint, with the interaction
measure read from the frozen flow.

Two entry points share the same kernels and the same counter-addressed
draws: :func:`simulate_tree` produces one fully labelled
:class:`~branchfield.engine.trajectory.TreeTrajectory`, and
:func:`simulate_population` runs a flat batch of independent trees,
recording only what the caller asks for (snapshots, per-tree moments,
running maxima, cost accumulators).  A tree simulated alone is bit-identical
to the same tree inside a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import rng
from ..errors import CoverageError, SimulationDiagnosticError
from ..flows import MeasureFlow
from ..measures import Configuration, FiniteMeasure, mean_measure
from ..model import ClosedLoopControl, ModelCoefficients
from ..timegrid import TimeGrid
from . import _lanes
from ._kernel_np import tree_slots
from .initial import (InitialLaw, as_initial_law, population_counts,
                      sample_initial_positions)
from .trajectory import BranchEvent, TreeTrajectory


def sample_offspring(u: float, probs: Sequence[float]) -> int:
    """Offspring count for a uniform draw u in [0, 1): the unique l with
    u in [p_0 + ... + p_{l-1}, p_0 + ... + p_l)."""
    if not 0 <= u < 1:
        raise ValueError("u must lie in [0, 1)")
    cum = np.cumsum(np.asarray(probs, dtype=float))
    return int(min(np.searchsorted(cum, u, side="right"), cum.size - 1))


def _step_generic(model: ModelCoefficients, control: ClosedLoopControl,
                  mu: FiniteMeasure, t: float, dt: float,
                  x: np.ndarray, tree: np.ndarray,
                  seed: int, step_index: int):
    """Reference step for arbitrary vectorized coefficients in any dimension."""
    n, d = x.shape
    if n == 0:
        empty_i = np.zeros(0, dtype=np.int64)
        return x.copy(), tree.copy(), empty_i, empty_i
    slots = tree_slots(tree)
    a = control.values(t, x)
    bv = np.atleast_2d(np.asarray(model.b(t, x, mu, a), dtype=float))
    if bv.shape != (n, d):
        raise ValueError(f"drift returned shape {bv.shape}, expected {(n, d)}")
    smat = model.sigma_matrix(t, x, mu, a)
    z = np.stack(
        [rng.gaussians(seed, tree, step_index, slots, c) for c in range(d)],
        axis=1,
    )
    x_new = x + bv * dt + np.einsum("aij,aj->ai", smat, z) * math.sqrt(dt)

    gam = model.gamma_values(t, x, mu, a)
    p_event = -math.expm1(-model.gamma_bar * dt)
    u_evt = rng.uniforms(seed, tree, step_index, slots, d + rng.CH_EVENT_OFFSET)
    u_acc = rng.uniforms(seed, tree, step_index, slots, d + rng.CH_ACCEPT_OFFSET)
    u_off = rng.uniforms(seed, tree, step_index, slots, d + rng.CH_OFFSPRING_OFFSET)
    event = (u_evt < p_event) & (u_acc * model.gamma_bar < gam)

    reps = np.ones(n, dtype=np.int64)
    parent_idx = np.flatnonzero(event)
    if parent_idx.size:
        probs = model.progeny.probabilities(t, x[parent_idx], mu, a[parent_idx])
        cum = np.cumsum(probs, axis=1)
        counts = (u_off[parent_idx, None] >= cum).sum(axis=1)
        counts = np.minimum(counts, cum.shape[1] - 1).astype(np.int64)
        reps[parent_idx] = counts
    else:
        counts = np.zeros(0, dtype=np.int64)

    x_out = np.repeat(x_new, reps, axis=0)
    tree_out = np.repeat(tree, reps)
    return x_out, tree_out, parent_idx, counts


@dataclass
class _Stepper:
    """Bound step function for a fixed (model, control, flow, grid)."""

    model: ModelCoefficients
    control: ClosedLoopControl
    flow: MeasureFlow
    grid: TimeGrid
    seed: int
    structured: bool
    masses: np.ndarray | None = None
    cum_progeny: np.ndarray | None = None

    @classmethod
    def build(cls, model, control, flow, grid, seed) -> "_Stepper":
        if not flow.covers(grid.times):
            raise CoverageError("measure flow does not cover the time grid")
        structured = (
            model.structured is not None
            and control.is_affine
            and model.dimension == 1
        )
        masses = cum = None
        if structured:
            masses = np.array([flow.mass_at(t) for t in grid.times])
            cum = np.cumsum(model.structured.progeny_probs)
        return cls(model, control, flow, grid, seed, structured, masses, cum)

    def control_values(self, j: int, x: np.ndarray) -> np.ndarray:
        return self.control.values(self.grid.times[j], x)

    def measure_at_step(self, j: int) -> FiniteMeasure:
        return self.flow.measure_at(self.grid.times[j])

    def __call__(self, j: int, x: np.ndarray, tree: np.ndarray):
        t = self.grid.times[j]
        dt = self.grid.dt
        if self.structured:
            sd = self.model.structured
            k0, k1 = self.control.k0(t), self.control.k1(t)
            slope, const = sd.drift_terms(t, self.masses[j], k0, k1)
            x1, tree1, parents, counts = _lanes.step_structured(
                np.ascontiguousarray(x[:, 0]),
                tree,
                dt,
                slope,
                const,
                sd.sigma * math.sqrt(dt),
                -math.expm1(-self.model.gamma_bar * dt),
                sd.gamma,
                self.model.gamma_bar,
                self.cum_progeny,
                self.seed,
                j,
            )
            x_out = x1[:, None]
        else:
            mu = self.measure_at_step(j)
            x_out, tree1, parents, counts = _step_generic(
                self.model, self.control, mu, t, dt, x, tree, self.seed, j
            )
        if x_out.size and not np.all(np.isfinite(x_out)):
            bad = np.flatnonzero(~np.isfinite(x_out).all(axis=1))[0]
            raise SimulationDiagnosticError(
                f"non-finite position in tree {tree1[bad]} after step {j} "
                f"(t={t + dt:.6g})"
            )
        return x_out, tree1, parents, counts


def simulate_tree(model: ModelCoefficients, control: ClosedLoopControl,
                  flow: MeasureFlow, init: Configuration, grid: TimeGrid,
                  rng_seed: int, tree_index: int = 0) -> TreeTrajectory:
    """Simulate one tree with full genealogy bookkeeping.

    Reproducible: the trajectory is a pure function of the arguments.  The
    same ``tree_index`` inside :func:`simulate_population` yields the same
    particle paths.
    """
    stepper = _Stepper.build(model, control, flow, grid, rng_seed)
    x = init.positions.copy()
    if x.ndim != 2 or (x.size and x.shape[1] != model.dimension):
        x = x.reshape(-1, model.dimension)
    labels = list(init.labels)
    tree = np.full(x.shape[0], tree_index, dtype=np.int64)
    snapshots = [init]
    events: list[BranchEvent] = []

    for j in range(grid.n_steps):
        x, tree, parents, counts = stepper(j, x, tree)
        if parents.size:
            t_event = grid.times[j + 1]
            new_labels: list = []
            parent_set = {int(p): int(c) for p, c in zip(parents, counts)}
            for i, lab in enumerate(labels):
                if i in parent_set:
                    c = parent_set[i]
                    events.append(BranchEvent(float(t_event), lab, c))
                    new_labels.extend(lab + (child + 1,) for child in range(c))
                else:
                    new_labels.append(lab)
            labels = new_labels
        snapshots.append(
            Configuration(zip(labels, x), model.dimension)
        )
    return TreeTrajectory(grid, tuple(snapshots), tuple(events))


def empirical_measure(trees: Sequence[TreeTrajectory], t: float) -> FiniteMeasure:
    """Mean measure of the alive particles at a grid time across trees,
    one atom of weight 1/N per particle."""
    if not trees:
        raise ValueError("need at least one tree")
    configs = [tree.configuration_at(t) for tree in trees]
    return mean_measure(configs, trees[0].snapshots[0].dimension or 1)


@dataclass(frozen=True)
class CostHook:
    """Per-step accumulators for Monte Carlo cost estimation.

    ``running(t, x, a, mu)`` and ``terminal(x, mu)`` return one value per
    particle; the engine reduces them per tree (running values weighted by
    dt at the step's left endpoint)."""

    running: Callable[[float, np.ndarray, np.ndarray, FiniteMeasure], np.ndarray] | None = None
    terminal: Callable[[np.ndarray, FiniteMeasure], np.ndarray] | None = None


@dataclass
class RecordOptions:
    """What :func:`simulate_population` should retain.

    ``snapshot_times``/``per_tree_moment_times``: "all", or a list of grid
    times, or None.  Aggregate moments over the whole batch are always
    recorded at every grid time (they are cheap).
    """

    snapshot_times: str | Sequence[float] | None = None
    per_tree_moment_times: str | Sequence[float] | None = None
    sup_counts: bool = False
    sup_sumsq: bool = False
    cost: CostHook | None = None

    def resolve(self, grid: TimeGrid, option) -> np.ndarray:
        if option is None:
            return np.zeros(0, dtype=np.int64)
        if isinstance(option, str):
            if option != "all":
                raise ValueError(f"unknown recording option {option!r}")
            return np.arange(grid.n_times, dtype=np.int64)
        return np.array(sorted(grid.index_of(t) for t in option), dtype=np.int64)


@dataclass
class PopulationResult:
    """Output of a batched run; only requested fields are populated."""

    grid: TimeGrid
    n_trees: int
    total_counts: np.ndarray       # (n_times,) alive particles over all trees
    total_sum_x: np.ndarray        # (n_times,) sum of first coordinates
    total_sum_sq: np.ndarray       # (n_times,) sum of |x|^2
    snapshot_indices: np.ndarray
    snapshots: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    moment_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    tree_counts: np.ndarray | None = None    # (n_rec, n_trees)
    tree_sum_x: np.ndarray | None = None
    tree_sum_sq: np.ndarray | None = None
    sup_counts: np.ndarray | None = None     # (n_trees,)
    sup_sumsq: np.ndarray | None = None
    running_cost: np.ndarray | None = None   # (n_trees,)
    terminal_cost: np.ndarray | None = None

    @staticmethod
    def _snapshot_measure(positions: np.ndarray, n_trees: int) -> FiniteMeasure:
        if positions.size == 0:
            d = positions.shape[1] if positions.ndim == 2 else 1
            return FiniteMeasure.empty(d)
        pos = positions.reshape(positions.shape[0], -1)
        return FiniteMeasure(pos, np.full(pos.shape[0], 1.0 / n_trees),
                             pos.shape[1])

    def empirical_measure(self, t: float) -> FiniteMeasure:
        j = self.grid.index_of(t)
        where = np.flatnonzero(self.snapshot_indices == j)
        if where.size == 0:
            raise ValueError(f"no snapshot recorded at t={t}")
        positions, _ = self.snapshots[int(where[0])]
        return self._snapshot_measure(positions, self.n_trees)

    def flow(self, provenance: str = "empirical") -> MeasureFlow:
        if self.snapshot_indices.size != self.grid.n_times:
            raise ValueError("flow extraction needs snapshots at all grid times")
        measures = [self._snapshot_measure(positions, self.n_trees)
                    for positions, _ in self.snapshots]
        return MeasureFlow(self.grid.times, tuple(measures), provenance)

    def moment_estimates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(times, mass, m1, m2) estimates of the mean-measure flow."""
        n = self.n_trees
        return (self.grid.times, self.total_counts / n,
                self.total_sum_x / n, self.total_sum_sq / n)

    def moment_standard_errors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(times at recorded indices, se_mass, se_m1, se_m2); needs
        per-tree moments."""
        if self.tree_counts is None:
            raise ValueError("per-tree moments were not recorded")
        n = self.n_trees
        ts = self.grid.times[self.moment_indices]
        se = lambda a: a.std(axis=1, ddof=1) / math.sqrt(n)
        return ts, se(self.tree_counts.astype(float)), se(self.tree_sum_x), se(self.tree_sum_sq)


def simulate_population(model: ModelCoefficients, control: ClosedLoopControl,
                        flow: MeasureFlow, grid: TimeGrid, n_trees: int,
                        rng_seed: int, nu0: InitialLaw | FiniteMeasure,
                        scheme: str = "deterministic_rounding",
                        record: RecordOptions | None = None,
                        init_override: tuple[np.ndarray, np.ndarray] | None = None,
                        ) -> PopulationResult:
    """Simulate ``n_trees`` independent trees against the frozen flow.

    Trees are stored flat (position + tree id, sorted by tree); per-tree
    draws come from counter-addressed streams, so results do not depend on
    batch size and individual trees can be reproduced with
    :func:`simulate_tree`.  ``init_override`` (positions, tree ids) bypasses
    the initial sampling; used by tests.
    """
    record = record or RecordOptions()
    stepper = _Stepper.build(model, control, flow, grid, rng_seed)
    tree_range = np.arange(n_trees, dtype=np.int64)

    if init_override is not None:
        x, tree = init_override
        x = np.asarray(x, dtype=float).reshape(-1, model.dimension)
        tree = np.asarray(tree, dtype=np.int64)
    else:
        law = as_initial_law(nu0)
        counts0 = population_counts(law.mass, scheme, rng_seed, tree_range)
        x, tree = sample_initial_positions(law, counts0, rng_seed, tree_range)
        x = x.reshape(-1, model.dimension)

    snap_idx = record.resolve(grid, record.snapshot_times)
    mom_idx = record.resolve(grid, record.per_tree_moment_times)
    n_times = grid.n_times

    result = PopulationResult(
        grid=grid, n_trees=n_trees,
        total_counts=np.zeros(n_times), total_sum_x=np.zeros(n_times),
        total_sum_sq=np.zeros(n_times), snapshot_indices=snap_idx,
        moment_indices=mom_idx,
    )
    if mom_idx.size:
        result.tree_counts = np.zeros((mom_idx.size, n_trees))
        result.tree_sum_x = np.zeros((mom_idx.size, n_trees))
        result.tree_sum_sq = np.zeros((mom_idx.size, n_trees))
    if record.sup_counts:
        result.sup_counts = np.zeros(n_trees)
    if record.sup_sumsq:
        result.sup_sumsq = np.zeros(n_trees)
    hook = record.cost
    if hook is not None:
        result.running_cost = np.zeros(n_trees)
        result.terminal_cost = np.zeros(n_trees)

    snap_set = set(snap_idx.tolist())
    mom_lookup = {int(j): i for i, j in enumerate(mom_idx)}

    def observe(j: int, x: np.ndarray, tree: np.ndarray):
        first = x[:, 0] if x.size else np.zeros(0)
        sq = np.sum(x**2, axis=1) if x.size else np.zeros(0)
        result.total_counts[j] = tree.size
        result.total_sum_x[j] = first.sum()
        result.total_sum_sq[j] = sq.sum()
        if j in snap_set:
            result.snapshots.append((x.copy(), tree.copy()))
        if j in mom_lookup:
            i = mom_lookup[j]
            result.tree_counts[i] = np.bincount(tree, minlength=n_trees)
            result.tree_sum_x[i] = np.bincount(tree, weights=first,
                                               minlength=n_trees)
            result.tree_sum_sq[i] = np.bincount(tree, weights=sq,
                                                minlength=n_trees)
        if record.sup_counts:
            counts = np.bincount(tree, minlength=n_trees)
            np.maximum(result.sup_counts, counts, out=result.sup_counts)
        if record.sup_sumsq:
            per_tree = np.bincount(tree, weights=sq, minlength=n_trees)
            np.maximum(result.sup_sumsq, per_tree, out=result.sup_sumsq)

    observe(0, x, tree)
    for j in range(grid.n_steps):
        if hook is not None and hook.running is not None and x.size:
            t = grid.times[j]
            mu = stepper.measure_at_step(j)
            a = stepper.control_values(j, x)
            vals = np.asarray(hook.running(t, x, a, mu), dtype=float)
            result.running_cost += grid.dt * np.bincount(
                tree, weights=vals, minlength=n_trees
            )
        x, tree, _, _ = stepper(j, x, tree)
        observe(j + 1, x, tree)

    if hook is not None and hook.terminal is not None and x.size:
        mu = stepper.measure_at_step(grid.n_steps)
        vals = np.asarray(hook.terminal(x, mu), dtype=float)
        result.terminal_cost += np.bincount(tree, weights=vals,
                                            minlength=n_trees)
    return result
