"""Particle engine: initial populations, tree simulation, batched runs."""

from ._lanes import active_lane
from .initial import (AtomicLaw, GaussianLaw, InitialLaw, UniformLaw,
                      as_initial_law, init_population)
from .simulate import (CostHook, PopulationResult, RecordOptions,
                       empirical_measure, sample_offspring,
                       simulate_population, simulate_tree)
from .trajectory import BranchEvent, TreeTrajectory

__all__ = [
    "AtomicLaw", "BranchEvent", "CostHook", "GaussianLaw", "InitialLaw",
    "PopulationResult", "RecordOptions", "TreeTrajectory", "UniformLaw",
    "active_lane", "as_initial_law", "empirical_measure", "init_population",
    "sample_offspring", "simulate_population", "simulate_tree",
]
