"""Deterministic time-gridded flows of finite measures.

A :class:`MeasureFlow` is the frozen interaction term fed to the particle
engine: one finite measure per grid time.  Flows come from three sources
(recorded in ``provenance``): fixed-point iteration over simulations,
closed-form moment ODEs (represented by two-atom measures matching mass and
first two moments exactly), or a finite-difference density solver.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CoverageError
from .measures import FiniteMeasure


@dataclass(frozen=True)
class MeasureFlow:
    times: np.ndarray
    measures: tuple[FiniteMeasure, ...]
    provenance: str = "unspecified"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size != len(self.measures):
            raise ValueError("need one measure per time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        dims = {m.dimension for m in self.measures if m.n_atoms}
        if len(dims) > 1:
            raise ValueError(f"mixed dimensions {dims}")
        self.times.setflags(write=False)

    @property
    def dimension(self) -> int:
        for m in self.measures:
            if m.n_atoms:
                return m.dimension
        return self.measures[0].dimension

    def index_of(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        scale = max(abs(self.times[-1] - self.times[0]), 1.0)
        if abs(self.times[idx] - t) > 1e-9 * scale:
            raise CoverageError(f"t={t} not covered by this flow")
        return idx

    def measure_at(self, t: float) -> FiniteMeasure:
        return self.measures[self.index_of(t)]

    def mass_at(self, t: float) -> float:
        return self.measure_at(t).mass

    def covers(self, times: Sequence[float]) -> bool:
        try:
            for t in np.asarray(times, dtype=float):
                self.index_of(t)
        except CoverageError:
            return False
        return True

    def masses(self) -> np.ndarray:
        return np.array([m.mass for m in self.measures])

    def moment_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(times, mass, first moment (1D), second moment) along the flow."""
        mass = np.empty(self.times.size)
        m1 = np.empty(self.times.size)
        m2 = np.empty(self.times.size)
        for i, m in enumerate(self.measures):
            mb, mv, ms = m.moments()
            mass[i], m1[i], m2[i] = mb, (mv[0] if mv.size else 0.0), ms
        return self.times.copy(), mass, m1, m2

    # -- constructors --------------------------------------------------------

    @classmethod
    def constant(cls, measure: FiniteMeasure, times,
                 provenance: str = "constant") -> "MeasureFlow":
        times = np.asarray(times, dtype=float)
        return cls(times, tuple([measure] * times.size), provenance)

    @classmethod
    def from_moments(cls, times, mass, m1, m2,
                     provenance: str = "moment_ode") -> "MeasureFlow":
        """Two-atom measures matching (mass, m1, m2) exactly at each time.

        Exact stand-in for models whose coefficients and costs read the
        interaction measure only through these moments.
        """
        times = np.asarray(times, dtype=float)
        mass = np.asarray(mass, dtype=float)
        m1 = np.asarray(m1, dtype=float)
        m2 = np.asarray(m2, dtype=float)
        measures = []
        for mb, s1, s2 in zip(mass, m1, m2):
            if mb <= 0:
                measures.append(FiniteMeasure.empty(1))
                continue
            mean = s1 / mb
            spread_sq = max(s2 / mb - mean**2, 0.0)
            s = np.sqrt(spread_sq)
            measures.append(FiniteMeasure(
                np.array([[mean - s], [mean + s]]), np.array([mb / 2, mb / 2]), 1
            ))
        return cls(times, tuple(measures), provenance)

    # -- serialization -------------------------------------------------------

    def atoms_csv(self) -> str:
        """One row per (time, atom index): t, atom, x_1..x_d, weight."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        d = self.dimension
        writer.writerow(["t", "atom"] + [f"x_{i + 1}" for i in range(d)] + ["weight"])
        for t, m in zip(self.times, self.measures):
            for i, (pos, w) in enumerate(zip(m.positions, m.weights)):
                writer.writerow([f"{t:.17g}", i]
                                + [f"{v:.17g}" for v in pos] + [f"{w:.17g}"])
        return buf.getvalue()

    def moments_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "mass", "m1", "m2"])
        for t, m in zip(self.times, self.measures):
            mb, mv, ms = m.moments()
            m1 = mv[0] if mv.size else 0.0
            writer.writerow([f"{v:.17g}" for v in (t, mb, m1, ms)])
        return buf.getvalue()
