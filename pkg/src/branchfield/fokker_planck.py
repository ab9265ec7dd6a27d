"""1D finite-difference solver for the linear Fokker-Planck equation with a
branching source, used to cross-validate particle marginals.

With coefficients frozen along a measure flow, the mean-measure density
solves (weak form, equivalently)

    d rho / dt = -d_x(b rho) + d^2_xx(D rho) + pi rho,     D = sigma^2 / 2,

where pi = gamma * sum_l (l - 1) p_l is the net branching rate.  The scheme
is IMEX: conservative upwind advection (explicit), pointwise exponential
source (exact per step for time-frozen pi), implicit backward-Euler
diffusion whose reflecting discretization conserves mass to machine
precision.  An explicit-diffusion mode exists behind a CFL guard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded

from .errors import StabilityError
from .flows import MeasureFlow
from .measures import FiniteMeasure, equal_weight_atoms, wbar1_subsampled
from .model import ClosedLoopControl, ModelCoefficients
from .timegrid import TimeGrid


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform cell-centered grid on [x_lo, x_hi] with J cells."""

    x_lo: float
    x_hi: float
    n_cells: int

    def __post_init__(self):
        if self.x_hi <= self.x_lo or self.n_cells < 3:
            raise ValueError("need x_hi > x_lo and at least 3 cells")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + self.dx * (np.arange(self.n_cells) + 0.5)

    @property
    def interfaces(self) -> np.ndarray:
        return self.x_lo + self.dx * np.arange(1, self.n_cells)


@dataclass(frozen=True)
class FrozenCoefficients:
    """(b, D, pi) as functions of (t, x-array), frozen along a measure flow."""

    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusivity: Callable[[float, np.ndarray], np.ndarray]
    source: Callable[[float, np.ndarray], np.ndarray]

    @classmethod
    def from_model(cls, model: ModelCoefficients, flow: MeasureFlow,
                   control: ClosedLoopControl | None = None,
                   ) -> "FrozenCoefficients":
        ctrl = control or ClosedLoopControl.zero()

        def drift(t, x):
            mu = flow.measure_at(t)
            xs = np.asarray(x, dtype=float).reshape(-1, 1)
            a = ctrl.values(t, xs)
            return np.atleast_2d(model.b(t, xs, mu, a))[:, 0]

        def diffusivity(t, x):
            mu = flow.measure_at(t)
            xs = np.asarray(x, dtype=float).reshape(-1, 1)
            a = ctrl.values(t, xs)
            smat = model.sigma_matrix(t, xs, mu, a)
            return 0.5 * smat[:, 0, 0] ** 2

        def source(t, x):
            mu = flow.measure_at(t)
            xs = np.asarray(x, dtype=float).reshape(-1, 1)
            a = ctrl.values(t, xs)
            gam = model.gamma_values(t, xs, mu, a)
            probs = model.progeny.probabilities(t, xs, mu, a)
            ell = np.arange(probs.shape[1])
            return gam * (probs @ (ell - 1))

        return cls(drift, diffusivity, source)

    @classmethod
    def constants(cls, b: float, sigma: float, pi: float) -> "FrozenCoefficients":
        return cls(
            lambda t, x: np.full_like(np.asarray(x, dtype=float), b),
            lambda t, x: np.full_like(np.asarray(x, dtype=float),
                                      0.5 * sigma**2),
            lambda t, x: np.full_like(np.asarray(x, dtype=float), pi),
        )


@dataclass(frozen=True)
class DensityFlow:
    """Density history rho(t_i, x_j) with its mass trace."""

    space: SpaceGrid
    times: np.ndarray
    densities: np.ndarray  # (n_times, n_cells)
    boundary: str
    min_density: float

    @property
    def mass_trace(self) -> np.ndarray:
        return self.densities.sum(axis=1) * self.space.dx

    def density_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} not on the time grid")
        return self.densities[idx]

    def as_measure(self, t: float) -> FiniteMeasure:
        rho = np.maximum(self.density_at(t), 0.0)
        return FiniteMeasure(self.space.centers.reshape(-1, 1),
                             rho * self.space.dx, 1)

    def as_equal_weight_measure(self, t: float, unit_weight: float,
                                ) -> FiniteMeasure:
        rho = np.maximum(self.density_at(t), 0.0)
        return equal_weight_atoms(self.space.centers, rho * self.space.dx,
                                  unit_weight)

    def to_csv(self) -> str:
        lines = ["t,x,rho"]
        for t, row in zip(self.times, self.densities):
            lines.extend(
                f"{t:.17g},{x:.17g},{r:.17g}"
                for x, r in zip(self.space.centers, row)
            )
        return "\n".join(lines) + "\n"

    def mass_trace_csv(self) -> str:
        lines = ["t,mass"]
        lines.extend(
            f"{t:.17g},{m:.17g}" for t, m in zip(self.times, self.mass_trace)
        )
        return "\n".join(lines) + "\n"


def _initial_density(density0, sgrid: SpaceGrid) -> np.ndarray:
    if callable(density0):
        rho = np.asarray(density0(sgrid.centers), dtype=float)
    else:
        rho = np.asarray(density0, dtype=float)
    if rho.shape != (sgrid.n_cells,):
        raise ValueError(f"density must have shape ({sgrid.n_cells},)")
    if np.any(rho < 0):
        raise ValueError("initial density must be nonnegative")
    return rho.copy()


def _advection_update(rho: np.ndarray, b_iface: np.ndarray, dt: float,
                      dx: float, boundary: str) -> np.ndarray:
    """Conservative upwind fluxes; interior interfaces only for zero_flux."""
    flux = np.where(b_iface > 0, b_iface * rho[:-1], b_iface * rho[1:])
    out = rho.copy()
    out[:-1] -= dt / dx * flux
    out[1:] += dt / dx * flux
    if boundary == "zero_value":
        # outflow across the domain edges (ghost density zero)
        out[0] -= dt / dx * max(-float(b_iface[0]), 0.0) * rho[0] \
            if b_iface.size else 0.0
        out[-1] -= dt / dx * max(float(b_iface[-1]), 0.0) * rho[-1] \
            if b_iface.size else 0.0
    return out


def _diffusion_matrix_banded(d_cells: np.ndarray, dt: float, dx: float,
                             boundary: str) -> np.ndarray:
    """Banded (3, J) form of I - dt * S diag(D) for solve_banded."""
    j = d_cells.shape[0]
    lam = dt / dx**2
    ab = np.zeros((3, j))
    ab[0, 1:] = -lam * d_cells[1:]      # superdiagonal: column j uses D_j
    ab[2, :-1] = -lam * d_cells[:-1]    # subdiagonal
    diag = 1 + 2 * lam * d_cells
    if boundary == "zero_flux":
        diag = diag.copy()
        diag[0] = 1 + lam * d_cells[0]
        diag[-1] = 1 + lam * d_cells[-1]
    ab[1] = diag
    return ab


def fp_solve(coeffs: FrozenCoefficients, density0, sgrid: SpaceGrid,
             tgrid: TimeGrid, scheme: str = "imex",
             boundary: str = "zero_flux") -> DensityFlow:
    """March the density forward on the time grid.

    ``scheme='imex'`` (default) treats diffusion implicitly and is
    unconditionally stable in the diffusive term; ``scheme='explicit'``
    requires dt <= 0.4 dx^2 / sigma_max^2 and raises otherwise.  The
    advective CFL dt |b| / dx <= 1 is enforced in both modes.
    """
    if scheme not in ("imex", "explicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if boundary not in ("zero_flux", "zero_value"):
        raise ValueError(f"unknown boundary {boundary!r}")
    rho = _initial_density(density0, sgrid)
    dx, dt = sgrid.dx, tgrid.dt
    centers, ifaces = sgrid.centers, sgrid.interfaces
    out = np.empty((tgrid.n_times, sgrid.n_cells))
    out[0] = rho
    min_density = float(rho.min())

    for j, t in enumerate(tgrid.times[:-1]):
        b_iface = np.asarray(coeffs.drift(t, ifaces), dtype=float)
        d_cells = np.asarray(coeffs.diffusivity(t, centers), dtype=float)
        pi_cells = np.asarray(coeffs.source(t, centers), dtype=float)
        if not (np.all(np.isfinite(b_iface)) and np.all(np.isfinite(d_cells))
                and np.all(np.isfinite(pi_cells))):
            raise ValueError(f"non-finite coefficients at t={t}")

        cfl_adv = dt * np.abs(b_iface).max(initial=0.0) / dx
        if cfl_adv > 1.0:
            raise StabilityError(
                f"advective CFL {cfl_adv:.3f} > 1 at t={t}; refine dt"
            )
        if scheme == "explicit":
            sigma_sq = 2 * d_cells.max(initial=0.0)
            if sigma_sq > 0 and dt > 0.4 * dx**2 / sigma_sq:
                raise StabilityError(
                    f"explicit diffusion needs dt <= 0.4 dx^2/sigma^2 = "
                    f"{0.4 * dx**2 / sigma_sq:.3e}, got dt={dt:.3e}"
                )

        rho = _advection_update(rho, b_iface, dt, dx, boundary)
        rho = rho * np.exp(pi_cells * dt)
        if scheme == "imex":
            ab = _diffusion_matrix_banded(d_cells, dt, dx, boundary)
            rho = solve_banded((1, 1), ab, rho)
        else:
            w = d_cells * rho
            lap = np.empty_like(w)
            lap[1:-1] = w[:-2] - 2 * w[1:-1] + w[2:]
            if boundary == "zero_flux":
                lap[0] = w[1] - w[0]
                lap[-1] = w[-2] - w[-1]
            else:
                lap[0] = w[1] - 2 * w[0]
                lap[-1] = w[-2] - 2 * w[-1]
            rho = rho + dt / dx**2 * lap
        min_density = min(min_density, float(rho.min()))
        out[j + 1] = rho

    return DensityFlow(sgrid, tgrid.times.copy(), out, boundary, min_density)


@dataclass(frozen=True)
class WeightedNormSpec:
    """Exponential weight eta(x) = eta0 sqrt(1 + x^2) for the admissibility
    norm of initial densities."""

    eta0: float

    def __post_init__(self):
        if self.eta0 < 0:
            raise ValueError("eta0 must be nonnegative")

    def weight(self, x: np.ndarray) -> np.ndarray:
        return self.eta0 * np.sqrt(1 + np.asarray(x, dtype=float)**2)


def eta_norm(density: np.ndarray, xs: np.ndarray, spec: WeightedNormSpec,
             dx: float | None = None) -> float:
    """sqrt( sum_j exp(eta(x_j)) rho_j^2 dx ); inf when the weight overflows."""
    xs = np.asarray(xs, dtype=float)
    rho = np.asarray(density, dtype=float)
    if dx is None:
        dx = float(xs[1] - xs[0])
    with np.errstate(over="ignore"):
        weighted = np.exp(spec.weight(xs)) * rho**2 * dx
    total = weighted.sum()
    if not np.isfinite(total):
        return math.inf
    return math.sqrt(total)


def weak_form_residual(dflow: DensityFlow, coeffs: FrozenCoefficients,
                       phi: Callable, dphi: Callable, d2phi: Callable) -> float:
    """Residual of the distributional-solution identity for one static test
    function: <phi, mu_T> - <phi, mu_0> - int <b phi' + D phi'' + pi phi, mu>.
    Left-endpoint quadrature; O(dx + dt) for the scheme here."""
    xs = dflow.space.centers
    dx = dflow.space.dx
    pv, dpv, d2v = phi(xs), dphi(xs), d2phi(xs)
    start = float(dflow.densities[0] @ pv) * dx
    end = float(dflow.densities[-1] @ pv) * dx
    integral = 0.0
    dt = float(dflow.times[1] - dflow.times[0])
    for t, rho in zip(dflow.times[:-1], dflow.densities[:-1]):
        integrand = (coeffs.drift(t, xs) * dpv
                     + coeffs.diffusivity(t, xs) * d2v
                     + coeffs.source(t, xs) * pv)
        integral += dt * float(rho @ integrand) * dx
    return end - start - integral


@dataclass(frozen=True)
class UniquenessReport:
    """Pairwise final-time distances across solver resolutions and particle
    liftings of the same initial measure."""

    fd_resolutions: tuple[int, ...]
    fd_pairwise_wbar1: dict
    lifting_pairwise_wbar1: dict
    fd_vs_particles: dict


def uniqueness_stress(model: ModelCoefficients, control: ClosedLoopControl,
                      flow: MeasureFlow, nu0, tgrid: TimeGrid,
                      x_lo: float, x_hi: float,
                      resolutions: Sequence[int] = (400, 800),
                      liftings: Sequence[str] = ("bernoulli_residual",
                                                 "poisson"),
                      n_trees: int = 4000, rng_seed: int = 0,
                      atom_cap: int = 1000) -> UniquenessReport:
    """Probe uniqueness of the density flow numerically.

    Solves the density at several spatial resolutions and simulates particle
    systems from several liftings of the same initial measure, then reports
    all pairwise final-time extended Wasserstein distances.  A report, not a
    check: thresholds belong to the caller.
    """
    from . import rng as _rng
    from .engine.simulate import RecordOptions, simulate_population

    coeffs = FrozenCoefficients.from_model(model, flow, control)
    law = nu0
    if not hasattr(law, "density"):
        raise ValueError("uniqueness_stress needs an initial law with a density")
    t_end = tgrid.times[-1]

    fd_final = {}
    for cells in resolutions:
        sgrid = SpaceGrid(x_lo, x_hi, cells)
        dflow = fp_solve(coeffs, law.density, sgrid, tgrid)
        fd_final[cells] = dflow.as_equal_weight_measure(
            t_end, unit_weight=law.mass / atom_cap
        )
    fd_pairs = {
        (a, b): wbar1_subsampled(fd_final[a], fd_final[b], cap=atom_cap)
        for i, a in enumerate(resolutions) for b in list(resolutions)[i + 1:]
    }

    particle_final = {}
    for i, scheme in enumerate(liftings):
        res = simulate_population(
            model, control, flow, tgrid, n_trees,
            _rng.derive_seed(rng_seed, 31 + i), law, scheme=scheme,
            record=RecordOptions(snapshot_times=[t_end]),
        )
        particle_final[scheme] = res.empirical_measure(t_end)
    lift_pairs = {
        (a, b): wbar1_subsampled(particle_final[a], particle_final[b],
                                 cap=atom_cap)
        for i, a in enumerate(liftings) for b in list(liftings)[i + 1:]
    }

    cross = {}
    for cells in resolutions:
        for scheme in liftings:
            fd_atoms = fd_final[cells]
            emp = particle_final[scheme]
            fd_matched = equal_weight_atoms(
                fd_atoms.positions[:, 0], fd_atoms.weights,
                unit_weight=1.0 / n_trees,
            )
            cross[(cells, scheme)] = wbar1_subsampled(fd_matched, emp,
                                                      cap=atom_cap)
    return UniquenessReport(tuple(resolutions), fd_pairs, lift_pairs, cross)


def coefficient_conditions_report(coeffs: FrozenCoefficients, xs: np.ndarray,
                                  times: Sequence[float]) -> dict:
    """Sampled check of the sufficient conditions for uniqueness of the
    density flow: bounded drift/diffusivity and uniform ellipticity."""
    b_max = d_max = 0.0
    d_min = math.inf
    for t in times:
        b_max = max(b_max, float(np.abs(coeffs.drift(t, xs)).max()))
        d = np.asarray(coeffs.diffusivity(t, xs), dtype=float)
        d_max = max(d_max, float(d.max()))
        d_min = min(d_min, float(d.min()))
    return {
        "drift_bound": b_max,
        "diffusivity_bound": d_max,
        "ellipticity_floor": d_min,
        "uniformly_elliptic": bool(d_min > 0),
    }
