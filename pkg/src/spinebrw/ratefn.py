"""Large-deviation rate function machinery: one-dimensional Legendre
transforms of the jump log-MGF, the critical speed where the rate equals the
log mean growth, and the full tilt profile used by the importance sampler."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .model import BrwModel, IsotropicGaussian, NumericFault, mean_offspring

_NEWTON_CAP = 100


class RateDomainError(ValueError):
    """Argument outside the declared finiteness region of the log-MGF."""


class InfeasibleError(ValueError):
    """Requested level is outside the attainable range of the rate function."""


def log_mgf_1d(jump, lam: float) -> float:
    """log MGF of the jump's first coordinate, checked against its domain."""
    lo, hi = jump.mgf_domain
    if not (lo < lam < hi):
        raise RateDomainError(
            f"tilt {lam!r} outside log-MGF domain ({lo!r}, {hi!r})")
    return jump.log_mgf(lam)


def _expand_bracket(jump, c: float, sign: float) -> float:
    """Smallest |lam| of the given sign with (log MGF)'(lam) beyond c.

    Doubles outward while inside the (possibly finite, open) domain, then
    halves the remaining gap toward the boundary; a mean unattainable even
    at the boundary is an infeasibility of the moment condition (A3).
    """
    lo_dom, hi_dom = jump.mgf_domain
    bound = hi_dom if sign > 0 else -lo_dom
    lam, step = 0.0, 1.0
    while sign * (jump.dlog_mgf(sign * lam) - c) < 0:
        if math.isinf(bound):
            lam += step
            step *= 2.0
            if lam > 1e100:
                raise InfeasibleError(
                    f"mean {c!r} outside the attainable range of the tilted "
                    "mean (moment feasibility condition (A3))")
        else:
            gap = bound - lam
            if gap <= 1e-14 * max(1.0, bound):
                raise InfeasibleError(
                    f"mean {c!r} outside the attainable range of the tilted "
                    "mean (moment feasibility condition (A3))")
            lam = lam + step if lam + step < bound else lam + 0.5 * gap
            step *= 2.0
    return sign * lam


def _solve_tilt(jump, c: float) -> float:
    """Solve (log MGF)'(lam) = c by safeguarded Newton.

    The derivative is strictly increasing, so an outward-expanded bracket is
    valid and bisection is a safe fallback whenever a Newton step leaves it.
    """
    if jump.dlog_mgf(0.0) < c:
        lo, hi = 0.0, _expand_bracket(jump, c, 1.0)
    else:
        lo, hi = _expand_bracket(jump, c, -1.0), 0.0
    lam = 0.5 * (lo + hi)
    for _ in range(_NEWTON_CAP):
        resid = jump.dlog_mgf(lam) - c
        if abs(resid) <= 1e-12:
            return lam
        if resid > 0:
            hi = lam
        else:
            lo = lam
        d2 = jump.d2log_mgf(lam)
        lam_next = lam - resid / d2 if d2 > 0 else 0.5 * (lo + hi)
        if not (lo < lam_next < hi):
            lam_next = 0.5 * (lo + hi)
        lam = lam_next
    raise NumericFault(
        f"tilt solve for mean {c!r} did not converge "
        f"(lam={lam!r}, residual={jump.dlog_mgf(lam) - c!r})")


def tilt_for_mean(jump, c: float) -> float:
    """Tilt parameter whose exponentially tilted law has first-coordinate mean c."""
    if isinstance(jump, IsotropicGaussian):
        return c / jump.sigma ** 2
    return _solve_tilt(jump, c)


def legendre_rate(jump, c: float) -> float:
    """Rate at speed c via the generic Newton path (no closed-form shortcut)."""
    lam = _solve_tilt(jump, c)
    return lam * c - jump.log_mgf(lam)


def rate_1d(jump, c: float) -> float:
    """Legendre transform of the one-dimensional log-MGF at speed c."""
    if isinstance(jump, IsotropicGaussian):
        return c * c / (2.0 * jump.sigma ** 2)
    return legendre_rate(jump, c)


def solve_c1(jump, log_rho: float) -> float:
    """Unique positive speed where the rate function equals log_rho.

    Bisection brackets the root (the rate is increasing on c > 0), then
    Newton using rate'(c) = tilt(c) polishes to 1e-12.
    """
    if log_rho <= 0:
        raise InfeasibleError("log mean growth must be positive (supercritical)")
    if isinstance(jump, IsotropicGaussian):
        return jump.sigma * math.sqrt(2.0 * log_rho)
    lo, hi = 0.0, 1.0
    while rate_1d(jump, hi) < log_rho:
        lo = hi
        hi *= 2.0
        if hi > 1e12:
            raise InfeasibleError(
                "log mean growth exceeds the attainable range of the rate "
                "function (moment feasibility condition (A3))")
    c = 0.5 * (lo + hi)
    for _ in range(_NEWTON_CAP):
        resid = rate_1d(jump, c) - log_rho
        if abs(resid) <= 1e-12:
            return c
        if resid > 0:
            hi = c
        else:
            lo = c
        slope = tilt_for_mean(jump, c)
        c_next = c - resid / slope if slope > 0 else 0.5 * (lo + hi)
        if not (lo < c_next < hi):
            c_next = 0.5 * (lo + hi)
        c = c_next
    raise NumericFault(f"speed solve did not converge (c={c!r})")


@dataclass(frozen=True)
class CramerProfile:
    """All tilt constants of one estimator run, derived once from the model.

    chat1 is the chosen fast speed (> c1), chat2 the matching tilt, and
    (cbar1, eps1) a deterministic pair satisfying the strict gap inequality
    rate(chat1) - log_rho > (chat1 - cbar1 + 2 eps1) * chat2.
    """

    rho: float
    log_rho: float
    c1: float
    chat1: float
    chat2: float
    I_chat1: float
    psi_chat2: float
    cbar1: float
    eps1: float

    @property
    def decay_rate(self) -> float:
        """Per-step exponential decay I(chat1) - log rho of the target pmf."""
        return self.I_chat1 - self.log_rho

    def ccc_slack(self) -> float:
        """Relative slack of the gap inequality; positive means it holds strictly."""
        lhs = self.I_chat1 - self.log_rho
        rhs = (self.chat1 - self.cbar1 + 2.0 * self.eps1) * self.chat2
        return (lhs - rhs) / lhs


def derive_profile(model: BrwModel, chat1_factor: float) -> CramerProfile:
    """Derive every tilt constant for a lower-tail run at speed factor*c1.

    The (cbar1, eps1) pair is fixed by the reproducible recipe
    g = (I(chat1) - log rho)/chat2, cbar1 = chat1 - g/2, eps1 = g/8, which
    satisfies the gap inequality with relative slack 1/4 and keeps
    cbar1 > c1 by convexity of the rate function.
    """
    if chat1_factor <= 1.0:
        raise ValueError("chat1_factor must exceed 1 (lower-tail regime)")
    rho = mean_offspring(model.offspring)
    if rho <= 1.0:
        raise ValueError(f"mean offspring {rho!r} must exceed 1 (supercritical)")
    log_rho = math.log(rho)
    c1 = solve_c1(model.jump, log_rho)
    chat1 = chat1_factor * c1
    chat2 = tilt_for_mean(model.jump, chat1)
    I_chat1 = rate_1d(model.jump, chat1)
    psi_chat2 = log_rho + log_mgf_1d(model.jump, chat2)
    g = (I_chat1 - log_rho) / chat2
    cbar1 = chat1 - 0.5 * g
    eps1 = 0.125 * g
    return CramerProfile(rho=rho, log_rho=log_rho, c1=c1, chat1=chat1,
                         chat2=chat2, I_chat1=I_chat1, psi_chat2=psi_chat2,
                         cbar1=cbar1, eps1=eps1)
