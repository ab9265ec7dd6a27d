"""branchfield: simulation and certification toolkit for optimal control of
mean-field branching diffusions.

Particles diffuse, die at a dominated rate and are replaced by offspring;
coefficients interact through the deterministic flow of mean measures of the
alive population.  The package simulates such systems, resolves the
mean-field fixed point, solves the linear-quadratic case in closed form via
a backward Riccati system, and certifies the structural identities
(population bounds, flow property, dynamic programming, HJB residual,
verification, Fokker-Planck consistency) numerically.
"""

__version__ = "0.1.0"
