"""Closed-form machinery for the one-dimensional linear-quadratic problem.

Model family: drift b1(t) x + b2(t) mbar + b3(t) a, constant volatility,
constant death rate gamma with constant offspring distribution (net mass
growth rate theta = gamma * sum_l (l-1) p_l), running cost
L1(t) x^2 + L2(t) mbar + L3(t) m1 + L4(t) a^2 with L4 > 0, terminal cost
g1 x^2 + g2 mbar + g3 m1.

The candidate value function is the moment polynomial

    w(t, m) = Lambda(t) m2 + Gamma1(t) mbar + Gamma2(t) mbar m1
              + Gamma3(t) mbar^2 + Gamma4(t) mbar^3,

whose coefficients solve a backward system of five Riccati-type ODEs.  Two
writings of that system are in circulation, differing in whether the bare
linear terms of the Gamma equations carry the factor theta; both are
implemented (``convention`` = "theta_explicit" / "paper_printed") and the
HJB residual assembled from first principles is the arbiter -- it vanishes
identically for theta_explicit and does not for the other writing unless
theta = 1.  The optimal feedback is affine,

    a*(t, x, m) = -(2 b3 Lambda x + b3 Gamma2 mbar) / (2 L4).

Moment flows, policy evaluation and dynamic-programming segments close over
(mbar, m1, m2) for affine feedbacks and are integrated by RK4.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import RiccatiBlowupError
from .model import (ClosedLoopControl, TimeFn, affine_model_1d, as_time_fn,
                    theta_rate)
from .timegrid import TimeGrid

BLOWUP_LIMIT = 1e8

CONVENTIONS = ("theta_explicit", "paper_printed")


@dataclass(frozen=True)
class Moments:
    """(mass, first moment, second moment) of a finite measure on the line."""

    mass: float
    m1: float
    m2: float

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("mass must be nonnegative")
        if self.mass == 0 and (self.m1 != 0 or self.m2 != 0):
            raise ValueError("zero-mass measure has zero moments")
        if self.mass > 0 and self.m1**2 > self.mass * self.m2 * (1 + 1e-12) + 1e-300:
            raise ValueError("m1^2 <= mass * m2 violated (not a measure)")

    def as_tuple(self) -> tuple[float, float, float]:
        return self.mass, self.m1, self.m2


@dataclass(frozen=True)
class LQModel:
    """Coefficients of the linear-quadratic control problem.

    Scalars or callables of time are accepted for the time-dependent
    entries.  ``theta`` is always computed from (gamma, progeny), never
    supplied.
    """

    b1: float | TimeFn
    b2: float | TimeFn
    b3: float | TimeFn
    sigma: float
    gamma: float
    progeny: Sequence[float]
    L1: float | TimeFn
    L2: float | TimeFn
    L3: float | TimeFn
    L4: float | TimeFn
    g1: float
    g2: float
    g3: float
    horizon: float
    t0: float = 0.0
    gamma_bar: float | None = None

    def __post_init__(self):
        if self.horizon <= self.t0:
            raise ValueError("horizon must exceed t0")
        probs = np.asarray(self.progeny, dtype=float)
        if probs.ndim != 1 or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("progeny must be a probability vector")
        mean_offspring = float(np.arange(probs.size) @ probs)
        if mean_offspring <= 0:
            raise ValueError("mean offspring count must be strictly positive")
        gbar = self.gamma if self.gamma_bar is None else self.gamma_bar
        if not 0 < self.gamma <= gbar:
            raise ValueError("need 0 < gamma <= gamma_bar")
        object.__setattr__(self, "gamma_bar", gbar)
        l4 = self.fn("L4")
        for t in np.linspace(self.t0, self.horizon, 201):
            if l4(t) <= 0:
                raise ValueError(f"L4 must be strictly positive; L4({t})={l4(t)}")

    def fn(self, name: str) -> TimeFn:
        return as_time_fn(getattr(self, name))

    @property
    def theta(self) -> float:
        return theta_rate(self.gamma, self.progeny)

    def dynamics(self):
        """Engine-side coefficients of this model's particle system."""
        return affine_model_1d(
            self.fn("b1"), self.fn("b2"), self.fn("b3"), self.sigma,
            self.gamma, self.progeny, gamma_bar=self.gamma_bar,
        )

    def grid(self, n_steps: int) -> TimeGrid:
        return TimeGrid(self.t0, self.horizon, n_steps)


def _riccati_rhs(model: LQModel, convention: str) -> Callable:
    b1, b2, b3 = model.fn("b1"), model.fn("b2"), model.fn("b3")
    l1, l2, l3, l4 = (model.fn(k) for k in ("L1", "L2", "L3", "L4"))
    sig2 = model.sigma**2
    theta = model.theta
    if convention == "theta_explicit":
        c1, c2, c3, c4 = theta, 2 * theta, 2 * theta, 3 * theta
    elif convention == "paper_printed":
        c1, c2, c3, c4 = 1.0, 2.0, 2.0, 3.0
    else:
        raise ValueError(f"unknown convention {convention!r}")

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        lam, G1, G2, G3, G4 = y
        q = b3(t) ** 2 / l4(t)
        return np.array([
            q * lam**2 - l1(t) - 2 * b1(t) * lam - theta * lam,
            -sig2 * lam - c1 * G1,
            q * lam * G2 - 2 * b2(t) * lam - b1(t) * G2 - c2 * G2 - l3(t),
            -l2(t) - c3 * G3,
            q * G2**2 / 4 - b2(t) * G2 - c4 * G4,
        ])

    return rhs


def _rk4(rhs: Callable, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + h / 2 * k1)
    k3 = rhs(t + h / 2, y + h / 2 * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward solution of the five-coefficient system on a grid, with
    cubic interpolation in between.

    Time derivatives of the solved path are the ODE right-hand sides
    sampled along the integration (never finite differences of the stored
    values); they are frozen at solve time, so bumping ``values`` leaves the
    path derivative alone -- which is what lets the Bellman residual detect
    a perturbed coefficient instead of cancelling it algebraically.
    """

    model: LQModel
    convention: str
    times: np.ndarray
    values: np.ndarray        # (n_times, 5): Lambda, Gamma1..Gamma4
    deriv_values: np.ndarray  # (n_times, 5): rhs along the solved path
    _splines: tuple = field(repr=False, default=())
    _deriv_splines: tuple = field(repr=False, default=())

    def __post_init__(self):
        object.__setattr__(self, "_splines", tuple(
            CubicSpline(self.times, self.values[:, i]) for i in range(5)
        ))
        object.__setattr__(self, "_deriv_splines", tuple(
            CubicSpline(self.times, self.deriv_values[:, i]) for i in range(5)
        ))

    def coefficients(self, t: float) -> np.ndarray:
        self._check_span(t)
        return np.array([float(s(t)) for s in self._splines])

    def _check_span(self, t: float):
        if t < self.times[0] - 1e-9 or t > self.times[-1] + 1e-9:
            raise ValueError(
                f"t={t} outside the solved span "
                f"[{self.times[0]}, {self.times[-1]}]"
            )

    def derivatives(self, t: float) -> np.ndarray:
        """Path derivative of the solved coefficients at t."""
        self._check_span(t)
        return np.array([float(s(t)) for s in self._deriv_splines])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "Lambda", "Gamma1", "Gamma2", "Gamma3", "Gamma4"])
        for t, row in zip(self.times, self.values):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
        return buf.getvalue()


def solve_riccati(model: LQModel, n_steps: int = 2000,
                  convention: str = "theta_explicit") -> RiccatiSolution:
    """Integrate the coefficient system backward from the horizon by RK4.

    Terminal values (g1, 0, g3, g2, 0) hold exactly.  Raises
    :class:`RiccatiBlowupError` if any coefficient leaves +-1e8.
    """
    rhs = _riccati_rhs(model, convention)
    grid = model.grid(n_steps)
    times = grid.times
    values = np.empty((times.size, 5))
    values[-1] = (model.g1, 0.0, model.g3, model.g2, 0.0)
    h = -grid.dt
    y = values[-1].copy()
    for j in range(times.size - 1, 0, -1):
        y = _rk4(rhs, times[j], y, h)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP_LIMIT:
            raise RiccatiBlowupError(
                f"coefficient magnitude exceeded {BLOWUP_LIMIT:g} near "
                f"t={times[j - 1]:.6g}"
            )
        values[j - 1] = y
    deriv_values = np.array([rhs(t, v) for t, v in zip(times, values)])
    return RiccatiSolution(model, convention, times, values, deriv_values)


def lq_value(sol: RiccatiSolution, t: float, m: Moments) -> float:
    """Value-function candidate w(t, m)."""
    lam, g1, g2, g3, g4 = sol.coefficients(t)
    mb, m1, m2 = m.as_tuple()
    return lam * m2 + g1 * mb + g2 * mb * m1 + g3 * mb**2 + g4 * mb**3


def lq_optimal_control(sol: RiccatiSolution, t: float, x: float,
                       mbar: float) -> float:
    """Pointwise optimal feedback -(2 b3 Lambda x + b3 Gamma2 mbar)/(2 L4)."""
    lam, _, g2, _, _ = sol.coefficients(t)
    b3 = sol.model.fn("b3")(t)
    l4 = sol.model.fn("L4")(t)
    return -(2 * b3 * lam * x + b3 * g2 * mbar) / (2 * l4)


def optimal_affine_coefficients(sol: RiccatiSolution, t0: float,
                                mbar0: float) -> tuple[TimeFn, TimeFn]:
    """The optimal feedback as affine coefficient functions (k0, k1) along
    the flow started at (t0, mbar0).

    The mass flow is control-independent (mbar_t = mbar0 e^{theta (t-t0)}),
    so k0 is available in closed form.
    """
    model = sol.model
    theta = model.theta
    b3, l4 = model.fn("b3"), model.fn("L4")

    def k1(t: float) -> float:
        return -b3(t) * sol.coefficients(t)[0] / l4(t)

    def k0(t: float) -> float:
        mbar_t = mbar0 * math.exp(theta * (t - t0))
        return -b3(t) * sol.coefficients(t)[2] * mbar_t / (2 * l4(t))

    return k0, k1


def optimal_control_feedback(sol: RiccatiSolution, t0: float,
                             mbar0: float) -> ClosedLoopControl:
    k0, k1 = optimal_affine_coefficients(sol, t0, mbar0)
    span = (sol.model.t0, sol.model.horizon)
    return ClosedLoopControl.affine_over(k0, k1, span)


def hamiltonian_integrand(sol: RiccatiSolution, t: float, x: float,
                          mbar: float, a: float) -> float:
    """Control-dependent part of the Bellman integrand at one point:
    L4 a^2 + (2 b3 Lambda x + b3 Gamma2 mbar) a."""
    lam, _, g2, _, _ = sol.coefficients(t)
    b3 = sol.model.fn("b3")(t)
    l4 = sol.model.fn("L4")(t)
    return l4 * a**2 + (2 * b3 * lam * x + b3 * g2 * mbar) * a


def _moment_rhs(model: LQModel, k0: TimeFn, k1: TimeFn) -> Callable:
    b1, b2, b3 = model.fn("b1"), model.fn("b2"), model.fn("b3")
    l1, l2, l3, l4 = (model.fn(k) for k in ("L1", "L2", "L3", "L4"))
    sig2 = model.sigma**2
    theta = model.theta

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        mb, m1, m2, _cost = y
        a0, a1 = k0(t), k1(t)
        slope = b1(t) + b3(t) * a1
        const = b2(t) * mb + b3(t) * a0
        mean_a2 = a0**2 * mb + 2 * a0 * a1 * m1 + a1**2 * m2
        return np.array([
            theta * mb,
            (slope + theta) * m1 + const * mb,
            (2 * slope + theta) * m2 + 2 * const * m1 + sig2 * mb,
            l1(t) * m2 + l2(t) * mb**2 + l3(t) * mb * m1 + l4(t) * mean_a2,
        ])

    return rhs


@dataclass(frozen=True)
class MomentFlowResult:
    times: np.ndarray
    mass: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    running_cost: np.ndarray  # integral of the running cost from t0

    def moments_at(self, t: float) -> Moments:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} not on the moment grid")
        return Moments(self.mass[idx], self.m1[idx], self.m2[idx])


def lq_moment_flow(model: LQModel, control: tuple[TimeFn, TimeFn] | ClosedLoopControl,
                   t0: float, m0: Moments, n_steps: int = 2000,
                   t_end: float | None = None) -> MomentFlowResult:
    """RK4 moment flow (mbar, m1, m2) under an affine feedback, along with
    the accumulated running cost."""
    k0, k1 = _affine_pair(control)
    t_end = model.horizon if t_end is None else t_end
    if t_end <= t0:
        raise ValueError("t_end must exceed t0")
    rhs = _moment_rhs(model, k0, k1)
    times = np.linspace(t0, t_end, n_steps + 1)
    h = (t_end - t0) / n_steps
    out = np.empty((times.size, 4))
    out[0] = (m0.mass, m0.m1, m0.m2, 0.0)
    y = out[0].copy()
    for j in range(n_steps):
        y = _rk4(rhs, times[j], y, h)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP_LIMIT:
            raise RiccatiBlowupError(
                f"moment flow left the trust region near t={times[j + 1]:.6g}"
            )
        out[j + 1] = y
    return MomentFlowResult(times, out[:, 0], out[:, 1], out[:, 2], out[:, 3])


def _affine_pair(control) -> tuple[TimeFn, TimeFn]:
    if isinstance(control, ClosedLoopControl):
        if not control.is_affine:
            raise ValueError("moment closure requires an affine control")
        return control.k0, control.k1
    k0, k1 = control
    return as_time_fn(k0), as_time_fn(k1)


def lq_terminal_cost(model: LQModel, m: Moments) -> float:
    return model.g1 * m.m2 + model.g2 * m.mass**2 + model.g3 * m.mass * m.m1


def lq_cost_ode(model: LQModel, control, t0: float, m0: Moments,
                n_steps: int = 2000) -> float:
    """Deterministic policy evaluation: running cost integral plus terminal
    cost under an affine feedback, via the closed moment ODEs."""
    flow = lq_moment_flow(model, control, t0, m0, n_steps)
    m_end = Moments(flow.mass[-1], flow.m1[-1], flow.m2[-1])
    return float(flow.running_cost[-1]) + lq_terminal_cost(model, m_end)


def lq_running_segment(model: LQModel, control, t0: float, m0: Moments,
                       s: float, n_steps: int = 2000,
                       ) -> tuple[float, Moments]:
    """Running cost on [t0, s] and the flowed moments at s."""
    flow = lq_moment_flow(model, control, t0, m0, n_steps, t_end=s)
    return float(flow.running_cost[-1]), Moments(
        flow.mass[-1], flow.m1[-1], flow.m2[-1]
    )


def hjb_residual(sol: RiccatiSolution, t: float, m: Moments,
                 model: LQModel | None = None) -> float:
    """Bellman residual of the moment polynomial at (t, m), assembled from
    the functional derivatives and the pointwise-minimizing feedback.

    The time derivative comes from the solved ODE right-hand sides, the
    transport/diffusion/branching terms from the derivative formulas of the
    moment polynomial, and the control from the quadratic minimizer; nothing
    here assumes which convention produced the solution, which is what makes
    the residual a certificate.
    """
    model = sol.model if model is None else model
    lam, G1, G2, G3, G4 = sol.coefficients(t)
    dlam, dG1, dG2, dG3, dG4 = sol.derivatives(t)
    mb, m1, m2 = m.as_tuple()
    b1, b2, b3 = (model.fn(k)(t) for k in ("b1", "b2", "b3"))
    l1, l2, l3, l4 = (model.fn(k)(t) for k in ("L1", "L2", "L3", "L4"))
    sig2 = model.sigma**2
    theta = model.theta

    k1s = -b3 * lam / l4
    k0s = -b3 * G2 * mb / (2 * l4)
    mean_a = k0s * mb + k1s * m1
    mean_ax = k0s * m1 + k1s * m2
    mean_a2 = k0s**2 * mb + 2 * k0s * k1s * m1 + k1s**2 * m2

    dt_w = dlam * m2 + dG1 * mb + dG2 * mb * m1 + dG3 * mb**2 + dG4 * mb**3
    cost = l1 * m2 + l2 * mb**2 + l3 * mb * m1 + l4 * mean_a2
    drift = 2 * lam * (b1 * m2 + b2 * mb * m1 + b3 * mean_ax) \
        + G2 * mb * (b1 * m1 + b2 * mb**2 + b3 * mean_a)
    diffusion = sig2 * lam * mb
    branching = theta * (lam * m2 + G1 * mb + 2 * G2 * mb * m1
                         + 2 * G3 * mb**2 + 3 * G4 * mb**3)
    return dt_w + cost + drift + diffusion + branching
