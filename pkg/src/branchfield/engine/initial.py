"""Initial particle populations: lifting a finite measure to a random
configuration whose intensity measure matches it.

A target measure nu0 of mass mbar is realized by drawing a particle count
with mean mbar (several schemes) and placing the particles i.i.d. from
nu0 / mbar.  All randomness is counter-addressed, so every tree of a batch
draws its own initial state independently of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .. import rng
from ..measures import Configuration, FiniteMeasure

SCHEMES = ("deterministic_rounding", "bernoulli_residual", "poisson")


@dataclass(frozen=True)
class GaussianLaw:
    """mass x N(mean, sd^2) on the line."""

    mass: float
    mean: float
    sd: float
    dimension: int = 1

    def sample_positions(self, seed: int, tree: np.ndarray, slots: np.ndarray,
                         ) -> np.ndarray:
        z = rng.gaussians(seed, tree, rng.INIT_STEP, slots, rng.CH_INIT_POS)
        return (self.mean + self.sd * z)[:, None]

    def density(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.sd
        return self.mass * np.exp(-0.5 * z**2) / (self.sd * math.sqrt(2 * math.pi))

    def moments(self):
        m1 = self.mass * self.mean
        m2 = self.mass * (self.mean**2 + self.sd**2)
        return self.mass, np.array([m1]), m2

    def as_finite_measure(self, n_atoms: int, seed: int = 0) -> FiniteMeasure:
        slots = np.arange(n_atoms, dtype=np.int64)
        pos = self.sample_positions(seed, np.zeros(n_atoms, dtype=np.int64), slots)
        return FiniteMeasure(pos, np.full(n_atoms, self.mass / n_atoms), 1)


@dataclass(frozen=True)
class UniformLaw:
    """mass x Uniform(lo, hi) on the line."""

    mass: float
    lo: float
    hi: float
    dimension: int = 1

    def sample_positions(self, seed, tree, slots) -> np.ndarray:
        u = rng.uniforms(seed, tree, rng.INIT_STEP, slots, rng.CH_INIT_POS)
        return (self.lo + (self.hi - self.lo) * u)[:, None]

    def density(self, x: np.ndarray) -> np.ndarray:
        inside = (x >= self.lo) & (x <= self.hi)
        return self.mass * inside / (self.hi - self.lo)

    def moments(self):
        mid = 0.5 * (self.lo + self.hi)
        m2_unit = (self.hi**2 + self.hi * self.lo + self.lo**2) / 3.0
        return self.mass, np.array([self.mass * mid]), self.mass * m2_unit

    def as_finite_measure(self, n_atoms: int, seed: int = 0) -> FiniteMeasure:
        slots = np.arange(n_atoms, dtype=np.int64)
        pos = self.sample_positions(seed, np.zeros(n_atoms, dtype=np.int64), slots)
        return FiniteMeasure(pos, np.full(n_atoms, self.mass / n_atoms), 1)


@dataclass(frozen=True)
class AtomicLaw:
    """A finite atomic measure used directly as the target intensity."""

    measure: FiniteMeasure

    @property
    def mass(self) -> float:
        return self.measure.mass

    @property
    def dimension(self) -> int:
        return self.measure.dimension

    def sample_positions(self, seed, tree, slots) -> np.ndarray:
        u = rng.uniforms(seed, tree, rng.INIT_STEP, slots, rng.CH_INIT_ATOM)
        cum = np.cumsum(self.measure.weights)
        cum /= cum[-1]
        idx = np.minimum(
            np.searchsorted(cum, u, side="right"), self.measure.n_atoms - 1
        )
        return self.measure.positions[idx]

    def moments(self):
        return self.measure.moments()

    def as_finite_measure(self, n_atoms: int = 0, seed: int = 0) -> FiniteMeasure:
        return self.measure


InitialLaw = Union[GaussianLaw, UniformLaw, AtomicLaw]


def as_initial_law(nu0) -> InitialLaw:
    if isinstance(nu0, FiniteMeasure):
        return AtomicLaw(nu0)
    if isinstance(nu0, (GaussianLaw, UniformLaw, AtomicLaw)):
        return nu0
    raise TypeError(f"cannot interpret {type(nu0)!r} as an initial law")


def _poisson_counts(mass: float, u: np.ndarray) -> np.ndarray:
    if mass == 0:
        return np.zeros(u.shape, dtype=np.int64)
    kmax = int(mass + 12 * math.sqrt(mass) + 30)
    ks = np.arange(kmax + 1)
    logpmf = ks * math.log(mass) - mass - np.cumsum(
        np.concatenate([[0.0], np.log(np.maximum(ks[1:], 1))])
    )
    cdf = np.cumsum(np.exp(logpmf))
    return np.minimum(np.searchsorted(cdf, u, side="right"), kmax).astype(np.int64)


def population_counts(mass: float, scheme: str, seed: int,
                      tree: np.ndarray) -> np.ndarray:
    """Per-tree initial particle counts with mean ``mass``."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    tree = np.asarray(tree, dtype=np.int64)
    if mass < 0:
        raise ValueError("mass must be nonnegative")
    if scheme == "deterministic_rounding":
        n = int(round(mass))
        if abs(mass - n) > 1e-9 * max(mass, 1.0):
            raise ValueError(
                f"deterministic_rounding needs integer mass, got {mass}"
            )
        return np.full(tree.shape, n, dtype=np.int64)
    zeros = np.zeros(tree.shape, dtype=np.int64)
    u = rng.uniforms(seed, tree, rng.INIT_STEP, zeros, rng.CH_INIT_COUNT)
    if scheme == "bernoulli_residual":
        floor = math.floor(mass)
        frac = mass - floor
        return (floor + (u < frac)).astype(np.int64)
    return _poisson_counts(mass, u)


def sample_initial_positions(law: InitialLaw, counts: np.ndarray, seed: int,
                             tree: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions and tree ids for a batch of trees with given counts."""
    tree_ids = np.repeat(np.asarray(tree, dtype=np.int64), counts)
    slots = np.concatenate(
        [np.arange(c, dtype=np.int64) for c in counts]
    ) if tree_ids.size else np.zeros(0, dtype=np.int64)
    if tree_ids.size == 0:
        return np.zeros((0, law.dimension)), tree_ids
    return law.sample_positions(seed, tree_ids, slots), tree_ids


def init_population(nu0, scheme: str, rng_seed: int,
                    tree_index: int = 0) -> Configuration:
    """Draw one initial configuration targeting the measure ``nu0``.

    Root labels are (1,), ..., (n,).  ``deterministic_rounding`` requires an
    integer mass and emits exactly that many particles;
    ``bernoulli_residual`` emits floor(mass) plus a Bernoulli remainder;
    ``poisson`` emits a Poisson(mass) count.
    """
    law = as_initial_law(nu0)
    tree = np.array([tree_index], dtype=np.int64)
    counts = population_counts(law.mass, scheme, rng_seed, tree)
    positions, _ = sample_initial_positions(law, counts, rng_seed, tree)
    labels = [(i + 1,) for i in range(counts[0])]
    return Configuration(zip(labels, positions), law.dimension)
