"""Sampling of the biased skeleton: size-biased branching along a
distinguished lineage, one exponentially tilted displacement per brood, and
the random walk the chosen displacements trace out."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import BrwModel, OffspringLaw
from .ratefn import CramerProfile


def size_biased_support(law: OffspringLaw):
    """Support and CDF of the size-biased count law {k p_k / rho}, k >= 1."""
    mask = (law.counts >= 1) & (law.probs > 0)
    counts = law.counts[mask]
    weights = counts * law.probs[mask]
    total = weights.sum()
    if total <= 0:
        raise ValueError("size-biased law undefined: no mass on counts >= 1")
    cdf = np.cumsum(weights / total)
    cdf[-1] = 1.0
    return counts, cdf


def sample_size_biased_count(law: OffspringLaw, rng: np.random.Generator,
                             size=None):
    """Draw brood sizes reweighted proportionally to their value."""
    counts, cdf = size_biased_support(law)
    u = rng.random(size)
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(counts) - 1)
    out = counts[idx]
    if size is None:
        return int(out)
    return out


def sample_tilted_jump(jump, chat2: float, rng: np.random.Generator, size=None):
    """One draw (or a batch) from the jump law tilted along the first axis."""
    return jump.sample_tilted(rng, chat2, size)


@dataclass
class BoneSet:
    """Displacements of one brood along the skeleton.

    The member at spine_index (0-based) carries the tilted displacement and
    continues the skeleton; all other members are nominal.
    """

    count: int
    displacements: np.ndarray  # (count, d)
    spine_index: int


@dataclass
class SpinePath:
    """A sampled skeleton of n steps.

    positions[k] is the skeleton location after k steps (row 0 is the
    origin); the brood attached to step k (1-based) occupies
    bones[offsets[k-1]:offsets[k]] and spine_index[k-1] selects the member
    whose displacement equals positions[k] - positions[k-1].
    """

    n: int
    dim: int
    positions: np.ndarray    # (n+1, d)
    counts: np.ndarray       # (n,) int
    spine_index: np.ndarray  # (n,) int, 0-based within each brood
    bones: np.ndarray        # (total, d) flat displacements
    offsets: np.ndarray      # (n+1,) int prefix offsets into bones

    def bone_set(self, k: int) -> BoneSet:
        """Brood attached to step k in [1, n]."""
        if not 1 <= k <= self.n:
            raise IndexError(f"step {k} outside [1, {self.n}]")
        lo, hi = self.offsets[k - 1], self.offsets[k]
        return BoneSet(count=int(self.counts[k - 1]),
                       displacements=self.bones[lo:hi],
                       spine_index=int(self.spine_index[k - 1]))


def sample_bone_set(model: BrwModel, profile: CramerProfile,
                    rng: np.random.Generator) -> BoneSet:
    """Draw one brood: size-biased count, uniform spine slot, tilted member.

    This factorization realizes the joint biased brood law exactly: a
    uniform index with exactly one tilted member marginalizes to the density
    proportional to the sum of the tilted weights over the brood.
    """
    n_children = sample_size_biased_count(model.offspring, rng)
    w = int(rng.integers(n_children))
    disp = model.jump.sample(rng, n_children)
    disp[w] = sample_tilted_jump(model.jump, profile.chat2, rng)
    return BoneSet(count=n_children, displacements=disp, spine_index=w)


def sample_spine_path(model: BrwModel, profile: CramerProfile, n: int,
                      rng: np.random.Generator) -> SpinePath:
    """Sample n independent broods and accumulate the skeleton walk.

    Draw order is fixed (counts, slots, nominal members, tilted members) so
    identical streams give bitwise-identical paths.
    """
    d = model.dim
    if n == 0:
        return SpinePath(n=0, dim=d, positions=np.zeros((1, d)),
                         counts=np.zeros(0, dtype=np.int64),
                         spine_index=np.zeros(0, dtype=np.int64),
                         bones=np.zeros((0, d)),
                         offsets=np.zeros(1, dtype=np.int64))
    counts = sample_size_biased_count(model.offspring, rng, size=n)
    u = rng.random(n)
    w = np.minimum((u * counts).astype(np.int64), counts - 1)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    bones = model.jump.sample(rng, int(offsets[-1]))
    tilted = sample_tilted_jump(model.jump, profile.chat2, rng, size=n)
    slots = offsets[:-1] + w
    bones[slots] = tilted
    positions = np.zeros((n + 1, d))
    np.cumsum(tilted, axis=0, out=positions[1:])
    return SpinePath(n=n, dim=d, positions=positions, counts=counts,
                     spine_index=w, bones=bones, offsets=offsets)
