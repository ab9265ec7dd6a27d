"""Coefficients of the controlled branching diffusion and feedback controls.

All coefficient callables are vectorized over particles: they receive the
step time ``t``, an ``(A, d)`` array of particle positions, the current
interaction measure (a :class:`~branchfield.measures.FiniteMeasure`) and an
``(A,)`` array of control values, and return per-particle values.

``affine_model_1d`` builds the structured one-dimensional family

    drift   b(t, x, m, a) = b1(t) x + b2(t) m(R) + b3(t) a,
    sigma   constant,
    death rate gamma and offspring distribution constant,

which the simulation engine recognizes and routes through its fused kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .measures import FiniteMeasure

TimeFn = Callable[[float], float]


def as_time_fn(c) -> TimeFn:
    """Wrap a constant as a function of time; pass callables through."""
    if callable(c):
        return c
    value = float(c)
    return lambda t: value


def _normalize_probs(p: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise ValueError("offspring probabilities must lie in [0, 1]")
    p = np.clip(p, 0.0, None)
    total = p.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > 1e-6):
        raise ValueError("offspring probabilities must sum to 1")
    return p / total


@dataclass(frozen=True)
class ProgenyLaw:
    """Offspring-count distribution (p_0, ..., p_lmax).

    ``evaluator`` maps (t, positions, measure, controls) to an (A, lmax+1)
    array of probabilities; rows are renormalized when they drift from 1 by
    less than 1e-12 and rejected otherwise.  ``m1_bound`` is the declared
    uniform bound on the mean offspring count, asserted on every evaluation.
    """

    evaluator: Callable[[float, np.ndarray, FiniteMeasure, np.ndarray], np.ndarray]
    lmax: int
    m1_bound: float
    lipschitz_constants: tuple[float, ...] | None = None
    constant_probs: np.ndarray | None = None

    @classmethod
    def constant(cls, probs: Sequence[float], m1_bound: float | None = None,
                 lmax: int | None = None) -> "ProgenyLaw":
        p = np.asarray(probs, dtype=float)
        if lmax is not None and p.size > lmax + 1:
            # fold the tail into the top count
            folded = p[: lmax + 1].copy()
            folded[-1] += p[lmax + 1:].sum()
            p = folded
        p = _normalize_probs(p)
        mean = float(np.arange(p.size) @ p)
        bound = mean if m1_bound is None else float(m1_bound)
        if mean > bound + 1e-9:
            raise ValueError(f"mean offspring {mean} exceeds declared bound {bound}")

        def evaluator(t, x, m, a, _p=p):
            return np.broadcast_to(_p, (np.atleast_2d(x).shape[0], _p.size))

        return cls(evaluator, p.size - 1, bound, None, p)

    def probabilities(self, t: float, x: np.ndarray, m: FiniteMeasure,
                      a: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(self.evaluator(t, x, m, a), dtype=float))
        p = _normalize_probs(p)
        means = p @ np.arange(p.shape[1])
        if np.any(means > self.m1_bound + 1e-9):
            raise ValueError(
                f"mean offspring count {means.max():.6g} exceeds the declared "
                f"bound {self.m1_bound} at t={t}"
            )
        return p

    @property
    def mean_shift(self) -> float | None:
        """sum (l - 1) p_l when the law is constant, else None."""
        if self.constant_probs is None:
            return None
        ell = np.arange(self.constant_probs.size)
        return float((ell - 1) @ self.constant_probs)


@dataclass(frozen=True)
class StructuredDynamics:
    """Scalar summary of the affine one-dimensional coefficient family."""

    b1: TimeFn
    b2: TimeFn
    b3: TimeFn
    sigma: float
    gamma: float
    progeny_probs: np.ndarray

    def drift_terms(self, t: float, mbar: float, k0: float, k1: float,
                    ) -> tuple[float, float]:
        """Slope/intercept of the per-particle drift under an affine control
        a = k0 + k1 x, evaluated at frozen interaction mass mbar."""
        b1, b2, b3 = self.b1(t), self.b2(t), self.b3(t)
        return b1 + b3 * k1, b2 * mbar + b3 * k0


@dataclass(frozen=True)
class ModelCoefficients:
    """Drift, diffusion, death rate and progeny law of the particle system.

    ``gamma_bar`` dominates the death rate; every gamma evaluation is checked
    against [0, gamma_bar].  When ``growth_constant`` is declared, the linear
    growth bound |b| + |sigma| <= C (1 + |x| + mass + |a|) is spot-checked at
    construction on a fixed set of probe points.
    """

    b: Callable[[float, np.ndarray, FiniteMeasure, np.ndarray], np.ndarray]
    sigma: Callable[[float, np.ndarray, FiniteMeasure, np.ndarray], np.ndarray]
    gamma: Callable[[float, np.ndarray, FiniteMeasure, np.ndarray], np.ndarray]
    gamma_bar: float
    progeny: ProgenyLaw
    dimension: int = 1
    growth_constant: float | None = None
    structured: StructuredDynamics | None = None

    def __post_init__(self):
        if self.gamma_bar <= 0:
            raise ValueError("gamma_bar must be positive")
        if self.growth_constant is not None:
            self._spot_check_growth()

    def _spot_check_growth(self):
        c = self.growth_constant
        probe = FiniteMeasure.dirac(np.zeros(self.dimension), 1.0)
        xs = np.array([-3.0, -1.0, 0.0, 1.5, 4.0])
        x = np.zeros((xs.size, self.dimension))
        x[:, 0] = xs
        for a_val in (0.0, 1.0, -2.0):
            a = np.full(xs.size, a_val)
            bv = np.atleast_2d(self.b(0.0, x, probe, a))
            sv = self.sigma_matrix(0.0, x, probe, a)
            lhs = np.linalg.norm(bv, axis=1) + np.linalg.norm(
                sv.reshape(xs.size, -1), axis=1
            )
            bound = c * (1 + np.abs(xs) + probe.mass + abs(a_val))
            if np.any(lhs > bound + 1e-9):
                raise ValueError(
                    "coefficients violate the declared linear growth bound "
                    f"(constant {c}) at probe points"
                )

    def gamma_values(self, t: float, x: np.ndarray, m: FiniteMeasure,
                     a: np.ndarray) -> np.ndarray:
        g = np.asarray(self.gamma(t, x, m, a), dtype=float)
        g = np.broadcast_to(g, (np.atleast_2d(x).shape[0],)).astype(float)
        if np.any(g < -1e-12) or np.any(g > self.gamma_bar + 1e-12):
            raise ValueError(
                f"death rate left [0, gamma_bar={self.gamma_bar}] at t={t}: "
                f"range [{g.min():.6g}, {g.max():.6g}]"
            )
        return np.clip(g, 0.0, self.gamma_bar)

    def sigma_matrix(self, t: float, x: np.ndarray, m: FiniteMeasure,
                     a: np.ndarray) -> np.ndarray:
        """Normalize sigma output to an (A, d, d) array."""
        n, d = np.atleast_2d(x).shape
        s = np.asarray(self.sigma(t, x, m, a), dtype=float)
        if s.ndim == 0:
            return np.broadcast_to(np.eye(d) * s, (n, d, d))
        if s.ndim == 1 and s.shape == (n,):
            return s[:, None, None] * np.eye(d)
        if s.ndim == 2 and s.shape == (n, d):
            out = np.zeros((n, d, d))
            idx = np.arange(d)
            out[:, idx, idx] = s
            return out
        if s.ndim == 3 and s.shape == (n, d, d):
            return s
        raise ValueError(f"sigma returned unsupported shape {s.shape}")


@dataclass(frozen=True)
class ClosedLoopControl:
    """Markovian feedback a = alpha(t, x), identical for every particle.

    ``lipschitz_constant`` is the declared constant for both the Lipschitz
    and linear-growth conditions; it is spot-checked at construction.
    Affine controls carry their coefficient functions so the engine and the
    closed-form machinery can exploit them.
    """

    feedback: Callable[[float, np.ndarray], np.ndarray]
    lipschitz_constant: float
    kind: str = "general"
    k0: TimeFn | None = None
    k1: TimeFn | None = None
    check_times: tuple[float, ...] = (0.0, 0.5)

    def __post_init__(self):
        xs = np.array([[-5.0], [-1.0], [0.0], [2.0], [7.0]])
        for t in self.check_times:
            vals = np.asarray(self.feedback(t, xs), dtype=float).reshape(-1)
            growth = self.lipschitz_constant * (1 + np.abs(xs[:, 0]))
            if np.any(np.abs(vals) > growth + 1e-9):
                raise ValueError("control violates declared linear growth")
            slopes = np.abs(np.diff(vals)) / np.abs(np.diff(xs[:, 0]))
            if np.any(slopes > self.lipschitz_constant + 1e-9):
                raise ValueError("control violates declared Lipschitz constant")

    @classmethod
    def affine(cls, k0, k1) -> "ClosedLoopControl":
        return cls.affine_over(k0, k1, (0.0, 1.0))

    @classmethod
    def affine_over(cls, k0, k1, t_span: tuple[float, float]) -> "ClosedLoopControl":
        """Affine feedback a = k0(t) + k1(t) x with the Lipschitz/growth
        constant estimated over the given time span."""
        k0f, k1f = as_time_fn(k0), as_time_fn(k1)

        def feedback(t, x):
            x = np.atleast_2d(x)
            return k0f(t) + k1f(t) * x[:, 0]

        ts = np.linspace(t_span[0], t_span[1], 41)
        lip = max(
            max(abs(k0f(t)) for t in ts),
            max(abs(k1f(t)) for t in ts),
            1e-12,
        )
        mid = 0.5 * (t_span[0] + t_span[1])
        return cls(feedback, lip, "affine", k0f, k1f,
                   check_times=(t_span[0], mid))

    @classmethod
    def zero(cls) -> "ClosedLoopControl":
        return cls.affine(0.0, 0.0)

    def values(self, t: float, x: np.ndarray) -> np.ndarray:
        a = np.asarray(self.feedback(t, x), dtype=float)
        return np.broadcast_to(a, (np.atleast_2d(x).shape[0],)).astype(float)

    @property
    def is_affine(self) -> bool:
        return self.kind == "affine" and self.k0 is not None


def affine_model_1d(b1, b2, b3, sigma: float, gamma: float,
                    progeny_probs: Sequence[float],
                    gamma_bar: float | None = None,
                    m1_bound: float | None = None) -> ModelCoefficients:
    """Structured 1D model with affine drift and constant branching data."""
    b1f, b2f, b3f = as_time_fn(b1), as_time_fn(b2), as_time_fn(b3)
    sigma = float(sigma)
    gamma = float(gamma)
    gbar = gamma if gamma_bar is None else float(gamma_bar)
    if not 0 <= gamma <= gbar:
        raise ValueError("need 0 <= gamma <= gamma_bar")
    progeny = ProgenyLaw.constant(progeny_probs, m1_bound=m1_bound)

    def b(t, x, m, a):
        x = np.atleast_2d(x)
        vals = b1f(t) * x[:, 0] + b2f(t) * m.mass + b3f(t) * np.asarray(a)
        return vals[:, None]

    def sigma_fn(t, x, m, a):
        return np.full(np.atleast_2d(x).shape[0], sigma)

    def gamma_fn(t, x, m, a):
        return np.full(np.atleast_2d(x).shape[0], gamma)

    structured = StructuredDynamics(b1f, b2f, b3f, sigma, gamma,
                                    progeny.constant_probs)
    return ModelCoefficients(
        b=b, sigma=sigma_fn, gamma=gamma_fn, gamma_bar=gbar,
        progeny=progeny, dimension=1, structured=structured,
    )


def theta_rate(gamma: float, progeny_probs: Sequence[float]) -> float:
    """Net mass growth rate gamma * sum_l (l - 1) p_l."""
    p = np.asarray(progeny_probs, dtype=float)
    return float(gamma * ((np.arange(p.size) - 1) @ p))
