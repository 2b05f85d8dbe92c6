"""Nominal branching random walk model: offspring law, isotropic jump law,
and the branching constants derived from them (mean growth, extinction
probability, single-lineage survival rate)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NumericFault(RuntimeError):
    """A fixed-point or root solve failed to reach its tolerance."""


def _as_entries(pmf) -> tuple[tuple[int, float], ...]:
    if isinstance(pmf, dict):
        items = pmf.items()
    else:
        items = pmf
    return tuple(sorted((int(k), float(p)) for k, p in items))


class OffspringLaw:
    """Finite-support offspring distribution given as (count, prob) atoms.

    Only finite support is accepted: moment conditions then hold
    automatically and there is no tail-truncation ambiguity.
    """

    def __init__(self, pmf):
        entries = _as_entries(pmf)
        counts = np.array([k for k, _ in entries], dtype=np.int64)
        probs = np.array([p for _, p in entries], dtype=np.float64)
        if len(entries) == 0:
            raise ValueError("offspring pmf is empty")
        if np.any(counts < 0):
            raise ValueError("offspring counts must be nonnegative integers")
        if len(np.unique(counts)) != len(counts):
            raise ValueError("offspring counts must be distinct")
        if np.any(probs < 0):
            raise ValueError("offspring probabilities must be nonnegative")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"offspring probabilities sum to {total!r}, not 1")
        self.entries = entries
        self.counts = counts
        self.probs = probs
        self._cdf = np.cumsum(probs)
        self._cdf[-1] = 1.0

    @property
    def max_count(self) -> int:
        return int(self.counts[-1])

    def prob(self, k: int) -> float:
        i = np.searchsorted(self.counts, k)
        if i < len(self.counts) and self.counts[i] == k:
            return float(self.probs[i])
        return 0.0

    def pgf(self, s: float) -> float:
        return float(np.sum(self.probs * np.power(float(s), self.counts)))

    def pgf_prime(self, s: float) -> float:
        ks = self.counts
        mask = ks >= 1
        return float(np.sum(ks[mask] * self.probs[mask]
                            * np.power(float(s), ks[mask] - 1)))

    def __repr__(self):
        body = ", ".join(f"{k}: {p:g}" for k, p in self.entries)
        return f"OffspringLaw({{{body}}})"


def mean_offspring(law: OffspringLaw) -> float:
    """Mean number of children per particle (finite exact sum)."""
    return float(np.sum(law.counts * law.probs))


def second_moment_offspring(law: OffspringLaw) -> float:
    return float(np.sum(law.counts.astype(np.float64) ** 2 * law.probs))


def extinction_prob(law: OffspringLaw) -> float:
    """Smallest fixed point of the generating function on [0, 1].

    Monotone iteration from s=0 converges to the smallest root; a Newton
    polish brings the residual below 1e-12.
    """
    if law.prob(1) == 1.0:
        return 0.0
    rho = mean_offspring(law)
    if rho <= 1.0:
        return 1.0
    s = 0.0
    for _ in range(100_000):
        s_next = law.pgf(s)
        if abs(s_next - s) < 1e-10:
            s = s_next
            break
        s = s_next
    for _ in range(100):
        resid = law.pgf(s) - s
        if abs(resid) <= 1e-12:
            return float(min(max(s, 0.0), 1.0))
        deriv = law.pgf_prime(s) - 1.0
        if deriv == 0.0:
            break
        s -= resid / deriv
    if abs(law.pgf(s) - s) <= 1e-12:
        return float(min(max(s, 0.0), 1.0))
    raise NumericFault(f"extinction fixed point did not converge (s={s!r})")


def gamma_rate(law: OffspringLaw) -> float:
    """Decay rate of the single-lineage survival probability.

    Returns -log sum_k k p_k q^(k-1) with the 0^0 = 1 convention, or +inf
    when the sum vanishes.
    """
    q = extinction_prob(law)
    total = 0.0
    for k, p in law.entries:
        if k == 0:
            continue
        total += k * p * q ** (k - 1)
    if total <= 0.0:
        return math.inf
    return -math.log(total)


def sample_offspring(law: OffspringLaw, rng: np.random.Generator, size=None):
    """Draw offspring counts by CDF inversion; deterministic given the stream."""
    u = rng.random(size)
    idx = np.searchsorted(law._cdf, u, side="right")
    idx = np.minimum(idx, len(law.counts) - 1)
    out = law.counts[idx]
    if size is None:
        return int(out)
    return out


@dataclass(frozen=True)
class IsotropicGaussian:
    """Centered spherical Gaussian jump with per-coordinate deviation sigma."""

    sigma: float
    dim: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")

    @property
    def mgf_domain(self) -> tuple[float, float]:
        return (-math.inf, math.inf)

    def log_mgf(self, lam: float) -> float:
        return 0.5 * self.sigma ** 2 * lam * lam

    def dlog_mgf(self, lam: float) -> float:
        return self.sigma ** 2 * lam

    def d2log_mgf(self, lam: float) -> float:
        return self.sigma ** 2

    def sample(self, rng: np.random.Generator, size=None):
        out = rng.standard_normal(self.dim if size is None
                                  else (size, self.dim))
        if self.sigma != 1.0:
            out *= self.sigma
        return out

    def sample_tilted(self, rng: np.random.Generator, theta: float, size=None):
        # Exponential tilt along the first axis shifts that mean to sigma^2 * theta.
        out = self.sample(rng, size)
        if size is None:
            out[0] += self.sigma ** 2 * theta
        else:
            out[:, 0] += self.sigma ** 2 * theta
        return out


class PluggableJump:
    """User-supplied isotropic jump law.

    The one-dimensional log-MGF (along the first axis) and its first two
    derivatives must be given analytically; tilting and the Legendre solves
    need exact derivatives. A tilted sampler is required only when the law
    is used by the spine sampler.
    """

    def __init__(self, dim, sampler, log_mgf, dlog_mgf, d2log_mgf,
                 mgf_domain=(-math.inf, math.inf), tilted_sampler=None):
        if dim < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self._sampler = sampler
        self._log_mgf = log_mgf
        self._dlog_mgf = dlog_mgf
        self._d2log_mgf = d2log_mgf
        self.mgf_domain = (float(mgf_domain[0]), float(mgf_domain[1]))
        self._tilted_sampler = tilted_sampler

    def log_mgf(self, lam):
        return float(self._log_mgf(lam))

    def dlog_mgf(self, lam):
        return float(self._dlog_mgf(lam))

    def d2log_mgf(self, lam):
        return float(self._d2log_mgf(lam))

    def _check(self, out, size):
        out = np.asarray(out, dtype=np.float64)
        want = (self.dim,) if size is None else (size, self.dim)
        if out.shape != want:
            raise ValueError(
                f"pluggable sampler returned shape {out.shape}, expected {want}")
        return out

    def sample(self, rng, size=None):
        return self._check(self._sampler(rng, size), size)

    def sample_tilted(self, rng, theta, size=None):
        if self._tilted_sampler is None:
            raise ValueError(
                "pluggable jump law has no tilted sampler configured")
        return self._check(self._tilted_sampler(rng, theta, size), size)


def sample_jump(law, rng: np.random.Generator, size=None):
    """One displacement (or a batch) from the nominal jump law."""
    return law.sample(rng, size)


@dataclass(frozen=True)
class BrwModel:
    """Nominal branching random walk in R^d."""

    dim: int
    offspring: OffspringLaw
    jump: object

    def __post_init__(self):
        if self.jump.dim != self.dim:
            raise ValueError(
                f"jump law dimension {self.jump.dim} != model dimension {self.dim}")

    @property
    def rho(self) -> float:
        return mean_offspring(self.offspring)


def reference_model() -> BrwModel:
    """Default benchmark model: d=3, children 1 or 3, unit Gaussian jumps."""
    law = OffspringLaw({1: 0.9144, 3: 0.0856})
    return BrwModel(dim=3, offspring=law, jump=IsotropicGaussian(sigma=1.0, dim=3))
