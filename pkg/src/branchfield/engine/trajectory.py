"""Single-tree trajectories with full genealogy bookkeeping."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from ..measures import Configuration, Label
from ..timegrid import TimeGrid


@dataclass(frozen=True)
class BranchEvent:
    time: float
    parent: Label
    n_offspring: int


@dataclass(frozen=True)
class TreeTrajectory:
    """Snapshots of one branching tree at every grid time, plus its events.

    Offspring labels extend the parent label by one positive integer and a
    parent never reappears after its branching event; every snapshot is a
    valid antichain configuration.
    """

    grid: TimeGrid
    snapshots: tuple[Configuration, ...]
    events: tuple[BranchEvent, ...]

    def __post_init__(self):
        if len(self.snapshots) != self.grid.n_times:
            raise ValueError("need one snapshot per grid time")

    def configuration_at(self, t: float) -> Configuration:
        return self.snapshots[self.grid.index_of(t)]

    def alive_counts(self) -> np.ndarray:
        return np.array([c.n_particles for c in self.snapshots])

    # -- serialization -------------------------------------------------------

    def events_json(self) -> str:
        return json.dumps(
            [
                {"t": e.time, "parent": list(e.parent), "offspring": e.n_offspring}
                for e in self.events
            ]
        )

    def snapshots_csv(self) -> str:
        """Rows: t, label (dot-joined), x_1..x_d."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        d = self.snapshots[0].dimension
        writer.writerow(["t", "label"] + [f"x_{i + 1}" for i in range(d)])
        for t, snap in zip(self.grid.times, self.snapshots):
            for lab, pos in zip(snap.labels, snap.positions):
                writer.writerow(
                    [f"{t:.17g}", ".".join(map(str, lab))]
                    + [f"{v:.17g}" for v in pos]
                )
        return buf.getvalue()
