"""Chance-constraint machinery: risk allocation, back-off coefficients,
belief-space safety heuristics and the discrete safety-condition cost."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfinv

from .belief import AugmentedBeliefState, BeliefState, lateral_std
from .dynamics import IDX_EY


class InvalidBudget(ValueError):
    pass


class InvalidProbability(ValueError):
    pass


@dataclass(frozen=True)
class SafetyParams:
    """Discrete safety condition parameters: class-kappa rate and penalty weight."""

    cbf_rate: float = 0.35  # beta in h(z_k) >= (1 - beta) h(z_{k-1})
    penalty: float = 2000.0  # C, cost per unit violation

    def __post_init__(self):
        if not 0.0 < self.cbf_rate < 1.0:
            raise ValueError("cbf_rate must lie in (0, 1)")
        if self.penalty < 0.0:
            raise ValueError("penalty must be >= 0")


@dataclass
class Constraint:
    """Scalar constraint c(x) < 0 with optional analytic gradient."""

    fn: callable
    grad: callable = None
    name: str = ""


@dataclass
class ChanceConstraintSpec:
    constraints: list
    budgets: list
    p_fail: float
    backoff_mode: str = "gaussian"

    def __post_init__(self):
        if not 0.0 < self.p_fail <= 1.0:
            raise InvalidBudget(f"total failure budget {self.p_fail} outside (0, 1]")
        if len(self.budgets) != len(self.constraints):
            raise InvalidBudget("one budget per constraint required")
        for p in self.budgets:
            if not 0.0 < p <= 0.5:
                raise InvalidBudget(f"per-constraint budget {p} outside (0, 0.5]")
        if math.fsum(self.budgets) > self.p_fail + 1e-12:
            raise InvalidBudget("budgets exceed the total failure budget")
        if self.backoff_mode not in ("cantelli", "gaussian"):
            raise ValueError(f"unknown backoff mode {self.backoff_mode!r}")

    def backoffs(self):
        fn = backoff_cantelli if self.backoff_mode == "cantelli" else backoff_gaussian
        return [fn(p) for p in self.budgets]


def allocate_budget(p_fail: float, z: int):
    """Uniform Boole-Bonferroni split of the failure budget over z constraints."""
    if not 0.0 < p_fail <= 1.0:
        raise InvalidBudget(f"failure budget {p_fail} outside (0, 1]")
    if z < 1:
        raise InvalidBudget("constraint count must be >= 1")
    share = p_fail / z
    parts = [share] * (z - 1)
    parts.append(p_fail - share * (z - 1))
    return parts


def backoff_cantelli(p: float) -> float:
    """Distribution-free back-off: sqrt((1-p)/p)."""
    if not 0.0 < p < 1.0:
        raise InvalidProbability(f"probability {p} outside (0, 1)")
    return math.sqrt((1.0 - p) / p)


def backoff_gaussian(p: float) -> float:
    """Gaussian-quantile back-off: sqrt(2) * erfinv(1 - 2p), valid for p in (0, 0.5]."""
    if not 0.0 < p <= 0.5:
        raise InvalidProbability(f"probability {p} outside (0, 0.5]")
    return float(math.sqrt(2.0) * erfinv(1.0 - 2.0 * p))


def constraint_gradient(con: Constraint, x, rel_step: float = 1e-5):
    """Gradient of c at x: analytic when supplied, else central differences."""
    x = np.asarray(x, dtype=float)
    if con.grad is not None:
        return np.asarray(con.grad(x), dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (con.fn(xp) - con.fn(xm)) / (2.0 * h)
    return g


def heuristic_h_i(belief: BeliefState, con: Constraint, nu: float) -> float:
    """Tightened margin of one chance constraint: -c(mean) - nu*sqrt(g' S g)."""
    x = belief.mean
    c = float(con.fn(x))
    eta = constraint_gradient(con, x)
    idx = list(belief.subset.indices)
    eta_t = eta[idx]
    q = float(eta_t @ belief.cov @ eta_t)
    return -c - nu * math.sqrt(max(q, 0.0))


def heuristic_h(belief: BeliefState, spec: ChanceConstraintSpec, nus=None) -> float:
    """Overall safe heuristic: minimum of the per-constraint margins."""
    if nus is None:
        nus = spec.backoffs()
    return min(heuristic_h_i(belief, con, nu) for con, nu in zip(spec.constraints, nus))


def track_dcbf_values(e_y, sigma_y, half_width: float, nu: float):
    """Track-keeping DCBF (max(w - nu*s, 0))^2 - e_y^2, vectorized.

    The margin clamps at zero once the back-off consumes the whole lane,
    so the heuristic can only report safety at the centerline in that case.
    """
    margin = np.clip(half_width - nu * np.asarray(sigma_y, dtype=float), 0.0, None)
    return margin * margin - np.square(np.asarray(e_y, dtype=float))


def track_dcbf(belief: BeliefState, half_width: float, nu: float) -> float:
    """Belief-space track-keeping DCBF at the belief's mean lateral offset."""
    sigma = lateral_std(belief)
    e_y = float(belief.mean[IDX_EY])
    return float(track_dcbf_values(e_y, sigma, half_width, nu))


def track_constraints(half_width: float):
    """The two lane-boundary constraints e_y <~ +-half_width as c(x) < 0 pairs."""

    def upper(x):
        return x[..., IDX_EY] - half_width

    def lower(x):
        return -x[..., IDX_EY] - half_width

    def upper_grad(x):
        g = np.zeros_like(np.asarray(x, dtype=float))
        g[..., IDX_EY] = 1.0
        return g

    def lower_grad(x):
        g = np.zeros_like(np.asarray(x, dtype=float))
        g[..., IDX_EY] = -1.0
        return g

    return [
        Constraint(upper, upper_grad, name="lane_upper"),
        Constraint(lower, lower_grad, name="lane_lower"),
    ]


def residual_values(h_current, h_previous, cbf_rate: float):
    """Discrete safety-condition residual h_k - (1-beta) h_{k-1}; >= 0 means safe."""
    return np.asarray(h_current) - (1.0 - cbf_rate) * np.asarray(h_previous)


def safety_residual(z: AugmentedBeliefState, h_eval, cbf_rate: float) -> float:
    if not 0.0 < cbf_rate < 1.0:
        raise ValueError("cbf_rate must lie in (0, 1)")
    return float(residual_values(h_eval(z.current), h_eval(z.previous), cbf_rate))


def penalty_values(h_current, h_previous, params: SafetyParams):
    """Violation cost C * max(-(h_k - (1-beta) h_{k-1}), 0), vectorized."""
    r = residual_values(h_current, h_previous, params.cbf_rate)
    return params.penalty * np.clip(-r, 0.0, None)


def safety_cost(z: AugmentedBeliefState, h_eval, params: SafetyParams) -> float:
    """Cost of violating the discrete safety condition for one augmented state."""
    return float(penalty_values(h_eval(z.current), h_eval(z.previous), params))
