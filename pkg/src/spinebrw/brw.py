"""Nominal (untilted) branching random walk simulation: full-history trees
used as off-spine decorations, and a brute-force first-passage oracle with a
vectorized multi-tree engine for probability mass estimates."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import BrwModel, sample_offspring

DEFAULT_CAP = 10 ** 7


@dataclass
class TreeHistory:
    """Positions of every particle of one tree, grouped by age."""

    root: np.ndarray
    generations: list  # generations[j] is an (m_j, d) array of age-j positions
    truncated: bool = False

    @property
    def ages(self) -> int:
        return len(self.generations) - 1


@dataclass(frozen=True)
class FptResult:
    hit: int | None
    horizon: int
    truncated: bool


def simulate_tree(model: BrwModel, root, generations: int, cap: int,
                  rng: np.random.Generator) -> TreeHistory:
    """Full history of a nominal tree grown for the given number of ages.

    Stops early (flagging nothing; history simply ends) once every lineage
    is dead, and truncates the run if the next generation would exceed cap.
    Truncation is detectable by the caller via history length; callers that
    must distinguish it should use the population-counting engines instead.
    """
    root = np.asarray(root, dtype=np.float64).reshape(model.dim)
    gens = [root[None, :].copy()]
    pos = gens[0]
    truncated = False
    for _ in range(generations):
        if pos.shape[0] == 0:
            gens.append(pos)
            continue
        counts = sample_offspring(model.offspring, rng, size=pos.shape[0])
        total = int(counts.sum())
        if total > cap:
            truncated = True
            break
        pos = np.repeat(pos, counts, axis=0)
        if total > 0:
            pos = pos + model.jump.sample(rng, total)
        gens.append(pos)
    return TreeHistory(root=root, generations=gens, truncated=truncated)


def min_distance_to_target(history: TreeHistory, center, up_to_age: int) -> float:
    """Minimum distance from any recorded position of age <= up_to_age to center."""
    center = np.asarray(center, dtype=np.float64)
    best = math.inf
    for gen in history.generations[: up_to_age + 1]:
        if gen.shape[0] == 0:
            continue
        d2 = np.sum((gen - center) ** 2, axis=1).min()
        best = min(best, math.sqrt(d2))
    return best


def _in_ball_sq(pos: np.ndarray, x: float) -> np.ndarray:
    # Squared distance to the unit ball center (x, 0, ..., 0); no sqrt in hot loop.
    d2 = (pos[:, 0] - x) ** 2
    if pos.shape[1] > 1:
        rest = pos[:, 1:]
        d2 += np.einsum("ij,ij->i", rest, rest)
    return d2 <= 1.0


def brute_force_fpt(model: BrwModel, x: float, horizon: int,
                    cap: int = DEFAULT_CAP,
                    rng: np.random.Generator | None = None) -> FptResult:
    """First generation at which any particle of one nominal tree enters the
    unit ball at distance x on the first axis."""
    if x <= 0:
        raise ValueError("target distance x must be positive")
    if rng is None:
        rng = np.random.default_rng()
    pos = np.zeros((1, model.dim))
    if abs(x) <= 1.0:
        return FptResult(hit=0, horizon=horizon, truncated=False)
    for g in range(1, horizon + 1):
        counts = sample_offspring(model.offspring, rng, size=pos.shape[0])
        total = int(counts.sum())
        if total == 0:
            return FptResult(hit=None, horizon=horizon, truncated=False)
        if total > cap:
            return FptResult(hit=None, horizon=horizon, truncated=True)
        pos = np.repeat(pos, counts, axis=0) + model.jump.sample(rng, total)
        if np.any(_in_ball_sq(pos, x)):
            return FptResult(hit=g, horizon=horizon, truncated=False)
    return FptResult(hit=None, horizon=horizon, truncated=False)


@dataclass
class PmfEstimate:
    """Empirical first-passage pmf from independent nominal trees."""

    x: float
    horizon: int
    runs: int
    hit_counts: np.ndarray  # (horizon+1,) trees whose first hit was generation g
    truncated: int

    @property
    def valid_runs(self) -> int:
        return self.runs - self.truncated

    def pmf(self, g: int) -> float:
        return self.hit_counts[g] / self.valid_runs

    def pmf_stderr(self, g: int) -> float:
        p = self.pmf(g)
        return math.sqrt(p * (1.0 - p) / self.valid_runs)

    def cdf(self, g: int) -> float:
        return float(self.hit_counts[: g + 1].sum()) / self.valid_runs

    def cdf_stderr(self, g: int) -> float:
        p = self.cdf(g)
        return math.sqrt(p * (1.0 - p) / self.valid_runs)


_PMF_CHUNK = 2048


def _pmf_chunk(model: BrwModel, x: float, horizon: int, cap: int,
               n_trees: int, seed, chunk_index: int):
    """Evolve a batch of trees in lockstep; returns (hit_counts, truncated)."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(chunk_index,)))
    d = model.dim
    hit_counts = np.zeros(horizon + 1, dtype=np.int64)
    truncated = 0
    if abs(x) <= 1.0:
        hit_counts[0] = n_trees
        return hit_counts, truncated
    pos = np.zeros((n_trees, d))
    tid = np.arange(n_trees, dtype=np.int64)
    for g in range(1, horizon + 1):
        if pos.shape[0] == 0:
            break
        counts = sample_offspring(model.offspring, rng, size=pos.shape[0])
        # Trees whose next generation would exceed cap stop here; their
        # particles are all still present, so the count is exact.
        pop_next = np.bincount(tid, weights=counts, minlength=n_trees)
        over = pop_next > cap
        if np.any(over):
            truncated += int(np.count_nonzero(over))
            keep = ~over[tid]
            pos, tid, counts = pos[keep], tid[keep], counts[keep]
        pos = np.repeat(pos, counts, axis=0)
        tid = np.repeat(tid, counts)
        if pos.shape[0] == 0:
            break
        pos = pos + model.jump.sample(rng, pos.shape[0])
        hit = _in_ball_sq(pos, x)
        if np.any(hit):
            # Hit trees are removed immediately, so every flagged tree is new.
            hit_ids = np.unique(tid[hit])
            hit_counts[g] += hit_ids.size
            hit_flag = np.zeros(n_trees, dtype=bool)
            hit_flag[hit_ids] = True
            keep = ~hit_flag[tid]
            pos, tid = pos[keep], tid[keep]
    return hit_counts, truncated


def _pmf_chunk_star(args):
    return _pmf_chunk(*args)


def fpt_pmf(model: BrwModel, x: float, horizon: int, runs: int, seed,
            cap: int = DEFAULT_CAP, threads: int = 1) -> PmfEstimate:
    """Brute-force pmf of the first passage time over independent runs.

    Chunks of fixed size own substreams keyed by (seed, chunk index), so the
    result is reproducible and independent of the thread count. Truncated
    trees are excluded from the sample, never scored as no-hit.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    sizes = [_PMF_CHUNK] * (runs // _PMF_CHUNK)
    if runs % _PMF_CHUNK:
        sizes.append(runs % _PMF_CHUNK)
    tasks = [(model, x, horizon, cap, size, seed, i)
             for i, size in enumerate(sizes)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_pmf_chunk_star, tasks, chunksize=4))
    else:
        results = [_pmf_chunk(*t) for t in tasks]
    hit_counts = np.zeros(horizon + 1, dtype=np.int64)
    truncated = 0
    for hc, tr in results:
        hit_counts += hc
        truncated += tr
    return PmfEstimate(x=x, horizon=horizon, runs=runs,
                       hit_counts=hit_counts, truncated=truncated)


def population_sizes(model: BrwModel, generations: int, runs: int, seed,
                     cap: int = DEFAULT_CAP) -> np.ndarray:
    """Terminal population size of independent trees (positions ignored)."""
    out = np.zeros(runs, dtype=np.int64)
    rng_seq = np.random.SeedSequence(entropy=seed)
    rng = np.random.default_rng(rng_seq)
    start = 0
    while start < runs:
        batch = min(_PMF_CHUNK, runs - start)
        pop = np.ones(batch, dtype=np.int64)
        for _ in range(generations):
            alive = np.flatnonzero(pop > 0)
            if alive.size == 0:
                break
            counts = sample_offspring(model.offspring, rng,
                                      size=int(pop[alive].sum()))
            # Children are grouped per tree by repeating tree ids per parent.
            owner = np.repeat(alive, pop[alive])
            new_pop = np.zeros(batch, dtype=np.int64)
            np.add.at(new_pop, owner, counts)
            pop = np.minimum(new_pop, cap)
        out[start:start + batch] = pop
        start += batch
    return out
