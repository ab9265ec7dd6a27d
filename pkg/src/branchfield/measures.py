"""Finite atomic measures, particle configurations, and transport distances.

The state objects of the toolkit live here:

* ``FiniteMeasure`` -- a weighted atomic nonnegative measure on R^d, used for
  initial data, marginal flows and empirical estimates.
* ``Configuration`` -- a finite antichain of genealogy-labelled particles,
  the state of one branching tree.
* ``CemeteryMetricSpec`` -- the truncated ground metric |x-y| ^ 1 extended by
  a cemetery state, which prices mass creation/destruction.

Distances: ``config_distance`` compares two configurations (symmetric label
difference plus truncated position mismatch on the common labels), ``wbar1``
is the exact extended 1-Wasserstein distance between finite measures of
possibly different mass (cemetery padding + optimal transport), and
``wbar1_dual_lower_bound`` evaluates the companion dual functional on a
user-supplied family of test functions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

#: Atoms lighter than this are dropped at construction time.
ZERO_WEIGHT = 1e-15

#: Hard cap on atoms per side in exact transport; callers must subsample.
MAX_OT_ATOMS = 10_000

#: When splitting weighted atoms into equal chunks for the assignment-based
#: solver, give up beyond this many chunks per side and use the LP instead.
MAX_CHUNKS = 6_000


class DimensionMismatchError(ValueError):
    """Operands live in different ambient dimensions."""


class AtomBudgetError(ValueError):
    """Too many atoms for exact transport; subsample first."""


def _as_positions(positions, dimension: int | None) -> np.ndarray:
    arr = np.asarray(positions, dtype=float)
    if arr.size == 0:
        if dimension is None:
            raise ValueError("dimension required for an empty measure")
        return arr.reshape(0, dimension)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dimension in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"positions must be (n, d), got shape {arr.shape}")
    if dimension is not None and arr.shape[1] != dimension:
        raise DimensionMismatchError(
            f"positions have dimension {arr.shape[1]}, expected {dimension}"
        )
    return arr


@dataclass(frozen=True)
class FiniteMeasure:
    """Weighted atomic nonnegative measure on R^d.

    Atoms with weight below ``ZERO_WEIGHT`` are dropped so downstream
    transport problems stay well posed.  Instances are immutable.
    """

    positions: np.ndarray
    weights: np.ndarray
    dimension: int

    def __init__(self, positions, weights, dimension: int | None = None):
        pos = _as_positions(positions, dimension)
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if w.shape != (pos.shape[0],):
            raise ValueError(f"{w.shape[0]} weights for {pos.shape[0]} atoms")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(w)):
            raise ValueError("positions and weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        keep = w >= ZERO_WEIGHT
        pos, w = pos[keep], w[keep]
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dimension", int(pos.shape[1]))
        self.positions.setflags(write=False)
        self.weights.setflags(write=False)

    # -- constructors -------------------------------------------------------

    @classmethod
    def empty(cls, dimension: int = 1) -> "FiniteMeasure":
        return cls(np.zeros((0, dimension)), np.zeros(0), dimension)

    @classmethod
    def dirac(cls, position, weight: float = 1.0) -> "FiniteMeasure":
        pos = np.atleast_1d(np.asarray(position, dtype=float))
        return cls(pos.reshape(1, -1), [weight], pos.size)

    @classmethod
    def uniform_atoms(cls, positions, total_mass: float, dimension: int | None = None):
        pos = _as_positions(positions, dimension)
        n = pos.shape[0]
        if n == 0:
            return cls.empty(dimension or 1)
        return cls(pos, np.full(n, total_mass / n), pos.shape[1])

    # -- basic functionals ---------------------------------------------------

    @property
    def n_atoms(self) -> int:
        return self.weights.shape[0]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moments(self) -> tuple[float, np.ndarray, float]:
        """Return (total mass, first moment vector, second moment scalar)."""
        if self.n_atoms == 0:
            return 0.0, np.zeros(self.dimension), 0.0
        m1 = self.weights @ self.positions
        m2 = float(self.weights @ np.sum(self.positions**2, axis=1))
        return self.mass, m1, m2

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        if self.n_atoms == 0:
            return 0.0
        return float(self.weights @ np.asarray(fn(self.positions), dtype=float))

    def scaled(self, factor: float) -> "FiniteMeasure":
        if factor < 0:
            raise ValueError("scale factor must be nonnegative")
        return FiniteMeasure(self.positions, self.weights * factor, self.dimension)

    def has_uniform_weights(self, rtol: float = 1e-9) -> bool:
        if self.n_atoms == 0:
            return True
        w0 = self.weights[0]
        return bool(np.all(np.abs(self.weights - w0) <= rtol * abs(w0)))

    def subsampled(self, cap: int) -> "FiniteMeasure":
        """Deterministic stride subsample to at most ``cap`` atoms.

        Total mass is preserved by rescaling the surviving weights.
        """
        if self.n_atoms <= cap:
            return self
        idx = np.linspace(0, self.n_atoms - 1, cap).round().astype(int)
        idx = np.unique(idx)
        w = self.weights[idx]
        return FiniteMeasure(
            self.positions[idx], w * (self.mass / w.sum()), self.dimension
        )

    # -- serialization -------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x_{i + 1}" for i in range(self.dimension)] + ["weight"])
        for pos, w in zip(self.positions, self.weights):
            writer.writerow([f"{v:.17g}" for v in pos] + [f"{w:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FiniteMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if header[-1] != "weight" or not header[0].startswith("x_"):
            raise ValueError("expected columns x_1..x_d, weight")
        d = len(header) - 1
        body = [row for row in rows[1:] if row]
        pos = np.array([[float(v) for v in row[:d]] for row in body]).reshape(-1, d)
        w = np.array([float(row[d]) for row in body])
        return cls(pos, w, d)

    def to_json(self) -> str:
        return json.dumps(
            [{"pos": list(map(float, p)), "w": float(w)}
             for p, w in zip(self.positions, self.weights)]
        )

    @classmethod
    def from_json(cls, text: str, dimension: int | None = None) -> "FiniteMeasure":
        entries = json.loads(text)
        if not entries:
            return cls.empty(dimension or 1)
        pos = np.array([e["pos"] for e in entries], dtype=float)
        w = np.array([e["w"] for e in entries], dtype=float)
        return cls(pos, w, pos.shape[1])


Label = tuple[int, ...]


@dataclass(frozen=True)
class Configuration:
    """A finite set of labelled particles forming a genealogy antichain.

    Labels are finite sequences of positive integers; child ``i`` of particle
    ``k`` carries label ``k + (i,)``.  No label in a configuration may be an
    ancestor (proper prefix) of another.
    """

    labels: tuple[Label, ...]
    positions: np.ndarray
    dimension: int

    def __init__(self, particles: Iterable[tuple[Sequence[int], Sequence[float]]],
                 dimension: int | None = None):
        items = list(particles)
        labels = tuple(tuple(int(i) for i in lab) for lab, _ in items)
        for lab in labels:
            if any(i < 1 for i in lab):
                raise ValueError(f"label entries must be positive integers: {lab}")
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be pairwise distinct")
        label_set = set(labels)
        for lab in labels:
            for cut in range(1, len(lab)):
                if lab[:cut] in label_set:
                    raise ValueError(
                        f"antichain violated: {lab[:cut]} is an ancestor of {lab}"
                    )
        if items:
            pos = np.asarray([p for _, p in items], dtype=float)
            if pos.ndim == 1:
                pos = pos.reshape(len(items), -1)
        else:
            pos = np.zeros((0, dimension or 1))
        if dimension is not None and pos.shape[1] != dimension:
            raise DimensionMismatchError(
                f"positions have dimension {pos.shape[1]}, expected {dimension}"
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "dimension", int(pos.shape[1]))
        self.positions.setflags(write=False)

    @classmethod
    def empty(cls, dimension: int = 1) -> "Configuration":
        return cls([], dimension)

    @property
    def n_particles(self) -> int:
        return len(self.labels)

    def as_measure(self, weight_per_particle: float = 1.0) -> FiniteMeasure:
        return FiniteMeasure(
            self.positions,
            np.full(self.n_particles, weight_per_particle),
            self.dimension,
        )


@dataclass(frozen=True)
class CemeteryMetricSpec:
    """Truncated metric rho(x, y) = |x - y| ^ 1 with a cemetery state.

    The cemetery sits at distance rho(x, base_point) + 1 from every x, so
    destroying far-away mass is never cheaper than destroying nearby mass.
    """

    base_point: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __init__(self, base_point=0.0):
        bp = np.atleast_1d(np.asarray(base_point, dtype=float))
        object.__setattr__(self, "base_point", bp)
        self.base_point.setflags(write=False)

    def rho(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Pairwise truncated distances between rows of x and rows of y."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        diff = x[:, None, :] - y[None, :, :]
        return np.minimum(np.sqrt(np.sum(diff**2, axis=-1)), 1.0)

    def rho_to_cemetery(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        bp = np.broadcast_to(self.base_point, x.shape[1:])
        dist = np.minimum(np.linalg.norm(x - bp, axis=-1), 1.0)
        return dist + 1.0


DEFAULT_METRIC = CemeteryMetricSpec()


def moments(mu: FiniteMeasure) -> tuple[float, np.ndarray, float]:
    """Module-level alias for ``FiniteMeasure.moments``."""
    return mu.moments()


def config_distance(e1: Configuration, e2: Configuration) -> float:
    """Distance between configurations: label mismatch count plus truncated
    position differences over the shared labels."""
    if e1.dimension != e2.dimension and e1.n_particles and e2.n_particles:
        raise DimensionMismatchError(
            f"configurations of dimension {e1.dimension} vs {e2.dimension}"
        )
    idx1 = {lab: i for i, lab in enumerate(e1.labels)}
    idx2 = {lab: i for i, lab in enumerate(e2.labels)}
    common = idx1.keys() & idx2.keys()
    sym_diff = len(idx1) + len(idx2) - 2 * len(common)
    total = float(sym_diff)
    for lab in common:
        gap = np.linalg.norm(e1.positions[idx1[lab]] - e2.positions[idx2[lab]])
        total += min(float(gap), 1.0)
    return total


def mean_measure(configs: Sequence[Configuration],
                 dimension: int | None = None) -> FiniteMeasure:
    """Empirical mean measure of a sample of configurations.

    Every particle of every configuration becomes an atom of weight 1/n,
    estimating the intensity measure of the configuration law.
    """
    n = len(configs)
    if n == 0:
        raise ValueError("need at least one configuration")
    dims = {c.dimension for c in configs if c.n_particles} or {dimension or 1}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed dimensions {dims}")
    d = dims.pop()
    blocks = [c.positions for c in configs if c.n_particles]
    if not blocks:
        return FiniteMeasure.empty(d)
    pos = np.vstack(blocks)
    return FiniteMeasure(pos, np.full(pos.shape[0], 1.0 / n), d)


# ---------------------------------------------------------------------------
# exact transport
# ---------------------------------------------------------------------------


def transport_cost(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray,
                   ) -> float:
    """Exact optimal cost of the transportation problem.

    Solves min <C, P> over nonnegative P with row sums ``supply`` and column
    sums ``demand`` (masses must match).  Dense LP via HiGHS; intended for
    modest sizes (a few hundred atoms per side).
    """
    supply = np.asarray(supply, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if abs(supply.sum() - demand.sum()) > 1e-9 * max(supply.sum(), 1.0):
        raise ValueError("supply and demand masses differ")
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    row = sparse.kron(sparse.eye(n, format="csr"), np.ones((1, m)))
    col = sparse.kron(np.ones((1, n)), sparse.eye(m, format="csr"))
    a_eq = sparse.vstack([row, col]).tocsr()
    b_eq = np.concatenate([supply, demand])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def _padded_cost_matrix(mu: FiniteMeasure, nu: FiniteMeasure,
                        spec: CemeteryMetricSpec) -> np.ndarray:
    """(n+1) x (m+1) cost matrix with a trailing cemetery row/column."""
    n, m = mu.n_atoms, nu.n_atoms
    cost = np.zeros((n + 1, m + 1))
    if n and m:
        cost[:n, :m] = spec.rho(mu.positions, nu.positions)
    if n:
        cost[:n, m] = spec.rho_to_cemetery(mu.positions)
    if m:
        cost[n, :m] = spec.rho_to_cemetery(nu.positions)
    return cost


def _common_chunk_weight(mu: FiniteMeasure, nu: FiniteMeasure,
                         padding_mass: float) -> float | None:
    """Largest weight w such that every atom weight and both cemetery paddings
    are integer multiples of w (within 1e-9 relative), or None."""
    weights = np.concatenate([mu.weights, nu.weights])
    if weights.size == 0:
        return None
    w = float(weights.min())
    if w <= 0:
        return None
    quantities = np.concatenate(
        [weights, [padding_mass - mu.mass, padding_mass - nu.mass]]
    )
    counts = quantities / w
    rounded = np.round(counts)
    if np.any(np.abs(counts - rounded) > 1e-9 * np.maximum(rounded, 1.0)):
        return None
    total = rounded[: weights.size].sum() + rounded[weights.size:].max()
    if total > MAX_CHUNKS:
        return None
    return w


def _wbar1_assignment(mu: FiniteMeasure, nu: FiniteMeasure,
                      spec: CemeteryMetricSpec, w: float,
                      padding_mass: float) -> float:
    """Exact solver when all weights are multiples of a common chunk weight:
    split atoms into unit chunks, pad with cemetery chunks, run Hungarian."""

    def chunks(measure: FiniteMeasure) -> tuple[np.ndarray, int]:
        counts = np.round(measure.weights / w).astype(int)
        pad = int(round((padding_mass - measure.mass) / w))
        return np.repeat(measure.positions, counts, axis=0), pad

    pos1, pad1 = chunks(mu)
    pos2, pad2 = chunks(nu)
    k = pos1.shape[0] + pad1
    if pos2.shape[0] + pad2 != k:
        raise AssertionError("chunk counts disagree after padding")
    if k == 0:
        return 0.0
    cost = np.zeros((k, k))
    n1, n2 = pos1.shape[0], pos2.shape[0]
    if n1 and n2:
        cost[:n1, :n2] = spec.rho(pos1, pos2)
    if n1 and pad2:
        cost[:n1, n2:] = spec.rho_to_cemetery(pos1)[:, None]
    if n2 and pad1:
        cost[n1:, :n2] = spec.rho_to_cemetery(pos2)[None, :]
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()) * w


def wbar1(mu: FiniteMeasure, nu: FiniteMeasure,
          spec: CemeteryMetricSpec = DEFAULT_METRIC,
          padding_mass: float | None = None) -> float:
    """Extended 1-Wasserstein distance between finite measures.

    The lighter measure is padded with cemetery mass until both sides carry
    ``padding_mass`` (default: the larger of the two masses), then the exact
    optimal transport cost under the truncated metric is returned.  The value
    does not depend on the padding mass as long as it dominates both masses.

    Two exact back ends: when every atom weight is an integer multiple of a
    common chunk weight (e.g. two empirical measures) the problem reduces to
    an assignment problem solved in C; otherwise a dense LP is used, which is
    only practical for a few hundred atoms per side.
    """
    if mu.n_atoms and nu.n_atoms and mu.dimension != nu.dimension:
        raise DimensionMismatchError(
            f"measures of dimension {mu.dimension} vs {nu.dimension}"
        )
    if mu.n_atoms > MAX_OT_ATOMS or nu.n_atoms > MAX_OT_ATOMS:
        raise AtomBudgetError(
            f"{max(mu.n_atoms, nu.n_atoms)} atoms exceeds the exact-transport "
            f"cap of {MAX_OT_ATOMS}; subsample first"
        )
    if padding_mass is None:
        padding_mass = max(mu.mass, nu.mass)
    elif padding_mass < max(mu.mass, nu.mass) - 1e-12:
        raise ValueError("padding mass must dominate both masses")
    if mu.n_atoms == 0 and nu.n_atoms == 0:
        return 0.0

    w = _common_chunk_weight(mu, nu, padding_mass)
    if w is not None:
        return _wbar1_assignment(mu, nu, spec, w, padding_mass)

    cost = _padded_cost_matrix(mu, nu, spec)
    supply = np.append(mu.weights, padding_mass - mu.mass)
    demand = np.append(nu.weights, padding_mass - nu.mass)
    return transport_cost(cost, supply, demand)


def wbar1_subsampled(mu: FiniteMeasure, nu: FiniteMeasure, cap: int = 2000,
                     spec: CemeteryMetricSpec = DEFAULT_METRIC) -> float:
    """``wbar1`` after stride-subsampling both sides to at most ``cap`` atoms.

    For two uniform-weight measures the same thinning stride is applied to
    both sides and the resulting cost is rescaled, which keeps the estimator
    exactly proportional; otherwise each side is subsampled independently
    with mass-preserving reweighting.  Exact whenever no subsampling occurs.
    """
    n = max(mu.n_atoms, nu.n_atoms)
    if n <= cap:
        return wbar1(mu, nu, spec)
    if (mu.has_uniform_weights() and nu.has_uniform_weights()
            and mu.n_atoms and nu.n_atoms
            and abs(mu.weights[0] - nu.weights[0]) <= 1e-12 * mu.weights[0]):
        stride = -(-n // cap)  # ceil
        sub1 = FiniteMeasure(mu.positions[::stride], mu.weights[::stride])
        sub2 = FiniteMeasure(nu.positions[::stride], nu.weights[::stride])
        return wbar1(sub1, sub2, spec) * stride
    return wbar1(mu.subsampled(cap), nu.subsampled(cap), spec)


def equal_weight_atoms(positions: np.ndarray, weights: np.ndarray,
                       unit_weight: float) -> FiniteMeasure:
    """Quantile resampling of a weighted 1D atom list into atoms of equal
    weight ``unit_weight`` (systematic midpoints of the cumulative mass).

    The result has round(mass / unit_weight) atoms; mass is matched to within
    one unit weight.  Used to put density-grid measures and empirical
    measures on a common footing for the assignment-based transport solver.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(positions)
    positions, weights = positions[order], weights[order]
    mass = weights.sum()
    count = int(round(mass / unit_weight))
    if count == 0:
        return FiniteMeasure.empty(1)
    cum = np.concatenate([[0.0], np.cumsum(weights)])
    targets = (np.arange(count) + 0.5) * (mass / count)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, positions.size - 1)
    return FiniteMeasure(positions[idx], np.full(count, unit_weight), 1)


def wbar1_dual_lower_bound(mu: FiniteMeasure, nu: FiniteMeasure,
                           test_fns: Sequence[Callable[[np.ndarray], np.ndarray]],
                           spec: CemeteryMetricSpec = DEFAULT_METRIC,
                           lip_tol: float = 1e-9) -> float:
    """Dual-side functional: max over test functions of <mu - nu, phi> plus
    the mass gap |mu(R^d) - nu(R^d)|.

    Each test function must be 1-Lipschitz for the truncated metric; this is
    verified on all pairs of atoms of the two measures and violations are
    rejected with a diagnostic.  The result is a sanity companion to the
    primal transport value (it never exceeds twice the primal cost).
    """
    pts = [m.positions for m in (mu, nu) if m.n_atoms]
    if not pts:
        return 0.0
    sample = np.vstack(pts)
    if sample.shape[0] > 200:
        sel = np.linspace(0, sample.shape[0] - 1, 200).round().astype(int)
        sample = sample[sel]
    rho = spec.rho(sample, sample)
    best = -math.inf
    for j, phi in enumerate(test_fns):
        vals = np.asarray(phi(sample), dtype=float).reshape(-1)
        gaps = np.abs(vals[:, None] - vals[None, :]) - rho
        worst = gaps.max()
        if worst > lip_tol:
            i1, i2 = np.unravel_index(np.argmax(gaps), gaps.shape)
            raise ValueError(
                f"test function #{j} violates 1-Lipschitz continuity: "
                f"|phi(x)-phi(y)| - rho(x,y) = {worst:.3e} at "
                f"x={sample[i1]}, y={sample[i2]}"
            )
        best = max(best, mu.integrate(phi) - nu.integrate(phi))
    return best + abs(mu.mass - nu.mass)
