"""Numerical solver for the slow-passage rate optimization: the exponential
cost of keeping a single lineage alive for a fraction of the horizon plus
the travel cost of its drifted walk, minimized over the split point."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .ratefn import RateDomainError, rate_1d

_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class UpperDevProblem:
    """Inputs of the slow-passage optimization for an isotropic model.

    chat1 is the (slow) target speed, strictly below the natural front
    speed c1; gamma is the single-lineage survival decay rate and may be
    +inf, in which case no feasible suppression exists.
    """

    chat1: float
    gamma: float
    log_rho: float
    c1: float
    jump: object

    def __post_init__(self):
        if not 0.0 < self.chat1 < self.c1:
            raise ValueError(
                f"chat1={self.chat1!r} must lie in (0, c1={self.c1!r})")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive (possibly +inf)")

    def rate(self, z: float) -> float:
        """Radial rate function; isotropy reduces it to the 1-d rate at |z|."""
        return rate_1d(self.jump, abs(z))


@dataclass(frozen=True)
class UpperDevSolution:
    value: float
    alpha_star: float
    active_constraint: bool
    feasible: bool


def isotropic_objective(problem: UpperDevProblem, alpha: float) -> float:
    """Survival cost plus travel cost when the lone particle lands on the
    axis at the constraint boundary; +inf outside the feasible region."""
    if not 0.0 < alpha < 1.0 / problem.chat1:
        return math.inf
    if math.isinf(problem.gamma):
        return math.inf
    arg = (1.0 - (1.0 / problem.chat1 - alpha) * problem.c1) / alpha
    try:
        return problem.gamma * alpha + alpha * problem.rate(arg)
    except RateDomainError:
        return math.inf


def gantert_objective(problem: UpperDevProblem, t: float) -> float:
    """One-dimensional cross-check form, on its own time scale t in
    (0, min(1 - chat1/c1, 1)]; equals the isotropic objective at
    alpha = t/chat1."""
    ch1, c1 = problem.chat1, problem.c1
    if not 0.0 < t <= min(1.0 - ch1 / c1, 1.0):
        return math.inf
    if math.isinf(problem.gamma):
        return math.inf
    arg = (ch1 - (1.0 - t) * c1) / t
    return (t * problem.gamma + t * problem.rate(arg)) / ch1


def _golden_min(fun, lo, hi, tol):
    a, b = lo, hi
    m1 = b - _INV_GOLDEN * (b - a)
    m2 = a + _INV_GOLDEN * (b - a)
    f1, f2 = fun(m1), fun(m2)
    while b - a > tol:
        if f1 < f2:
            b, m2, f2 = m2, m1, f1
            m1 = b - _INV_GOLDEN * (b - a)
            f1 = fun(m1)
        else:
            a, m1, f1 = m1, m2, f2
            m2 = a + _INV_GOLDEN * (b - a)
            f2 = fun(m2)
    mid = 0.5 * (a + b)
    return mid, fun(mid)


def solve_T(problem: UpperDevProblem, grid_points: int = 10_000,
            tol: float = 1e-10) -> UpperDevSolution:
    """Minimize the isotropic objective over the split fraction.

    A coarse grid over (0, 1/chat1) locates the basin and golden-section
    refines it to tol in alpha. All-infeasible grids (e.g. gamma = +inf)
    yield an infeasible report instead of an error.
    """
    hi = 1.0 / problem.chat1
    step = hi / (grid_points + 1)
    best_i, best_v = -1, math.inf
    for i in range(1, grid_points + 1):
        v = isotropic_objective(problem, i * step)
        if v < best_v:
            best_i, best_v = i, v
    if best_i < 0:
        return UpperDevSolution(value=math.inf, alpha_star=math.nan,
                                active_constraint=False, feasible=False)
    lo = max(step * (best_i - 1), step * 0.5)
    up = min(step * (best_i + 1), hi - step * 0.5)
    alpha, value = _golden_min(lambda a: isotropic_objective(problem, a),
                               lo, up, tol)
    arg = 1.0 - (1.0 / problem.chat1 - alpha) * problem.c1
    return UpperDevSolution(value=value, alpha_star=alpha,
                            active_constraint=arg <= 1e-9, feasible=True)
