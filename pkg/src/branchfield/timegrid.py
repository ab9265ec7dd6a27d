"""Uniform time grids for simulation and ODE integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_0 < t_1 < ... < t_M covering [t0, t_end]."""

    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_end <= self.t0:
            raise ValueError("t_end must exceed t0")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    @classmethod
    def from_dt(cls, t0: float, t_end: float, dt: float) -> "TimeGrid":
        if dt <= 0:
            raise ValueError("dt must be positive")
        span = t_end - t0
        n = int(round(span / dt))
        if n < 1 or abs(n * dt - span) > 1e-9 * max(abs(span), 1.0):
            raise ValueError(f"dt={dt} does not evenly divide [{t0}, {t_end}]")
        return cls(t0, t_end, n)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def n_times(self) -> int:
        return self.n_steps + 1

    def index_of(self, t: float) -> int:
        """Index of a grid time; raises if t is off-grid."""
        pos = (t - self.t0) / self.dt
        idx = int(round(pos))
        if idx < 0 or idx > self.n_steps or abs(pos - idx) > 1e-6:
            raise ValueError(f"t={t} is not on the grid")
        return idx

    def restricted(self, t_from: float, t_to: float) -> "TimeGrid":
        """Sub-grid from one grid time to another."""
        i, j = self.index_of(t_from), self.index_of(t_to)
        if j <= i:
            raise ValueError("empty restriction")
        return TimeGrid(self.times[i], self.times[j], j - i)
