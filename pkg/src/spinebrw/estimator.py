"""The lower-tail first-passage estimator: event gates on the sampled
skeleton, off-spine decoration simulation, the reweighted hit indicator, and
batch averaging with deterministic substreams.

run_batch drives a vectorized engine that advances blocks of replicates in
lockstep (one substream per block); the single-replicate operations expose
the same semantics one path at a time.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .brw import DEFAULT_CAP
from .model import BrwModel, sample_offspring
from .ratefn import CramerProfile
from .spine import SpinePath, sample_spine_path, size_biased_support

_BLOCK = 256
_LOG_SPACE_THRESHOLD = 600.0

REJECTED_AT_SKELETON = "rejected_at_skeleton"
REJECTED_AT_E8 = "rejected_at_E8"
ACCEPTED = "accepted"
TRUNCATED = "truncated"
_STAGES = (REJECTED_AT_SKELETON, REJECTED_AT_E8, ACCEPTED, TRUNCATED)


class TruncationError(RuntimeError):
    """Too many replicates hit the population cap to trust the batch."""


@dataclass(frozen=True)
class AlgoParams:
    """Window geometry of one estimator run.

    The four radii follow the single-knob recipe R4 = d/(2 chat2),
    R5 = omega R4, R2 = R3 = omega^2 R4, R1 = omega^3 R4; window lengths are
    w2 = ceil(R2 ln x), w3 = ceil(R3 ln x), w5 = floor(R5 ln x) and the
    horizon is n = floor(x/chat1) - t.

    e11_offset is a constant slack (in first-coordinate units) added to the
    exponent of the brood-weight gate E11 so that the gate only rejects
    genuinely extreme broods; offset 0 recovers the bare gate.
    """

    x: float
    t: int
    n: int
    omega: float
    R1: float
    R2: float
    R3: float
    R4: float
    R5: float
    w2: int
    w3: int
    w5: int
    e11_offset: float
    decoration_cap: int

    @classmethod
    def from_model(cls, model: BrwModel, profile: CramerProfile, x: float,
                   t: int = 0, omega: float = 1.5,
                   e11_offset: float | None = None,
                   decoration_cap: int = DEFAULT_CAP) -> "AlgoParams":
        if x <= 1.0:
            raise ValueError("target distance x must exceed the ball radius 1")
        if t < 0:
            raise ValueError("offset t must be a nonnegative integer")
        if omega < 1.0:
            raise ValueError("omega must be >= 1")
        if decoration_cap < 1:
            raise ValueError("decoration_cap must be >= 1")
        lnx = math.log(x)
        R4 = model.dim / (2.0 * profile.chat2)
        R5 = omega * R4
        R2 = omega ** 2 * R4
        R3 = R2
        R1 = omega ** 3 * R4
        w2 = math.ceil(R2 * lnx)
        w3 = math.ceil(R3 * lnx)
        w5 = math.floor(R5 * lnx)
        n = math.floor(x / profile.chat1) - t
        if n < 1:
            raise ValueError(f"horizon n={n} < 1: t too large for x={x}")
        if n < w2:
            raise ValueError(
                f"horizon n={n} shorter than decoration window w2={w2}; "
                "increase x or decrease t/omega")
        if omega > 1.0:
            assert R1 > R2 == R3 >= R5 > R4
        if e11_offset is None:
            tilt_sd = math.sqrt(model.jump.d2log_mgf(profile.chat2))
            e11_offset = (profile.chat1 + 8.0 * tilt_sd
                          + math.log(model.offspring.max_count) / profile.chat2)
        return cls(x=float(x), t=int(t), n=n, omega=float(omega),
                   R1=R1, R2=R2, R3=R3, R4=R4, R5=R5, w2=w2, w3=w3, w5=w5,
                   e11_offset=float(e11_offset),
                   decoration_cap=int(decoration_cap))

    @property
    def ceiling(self) -> float:
        """First-coordinate ceiling x + R4 ln x shared by gates E9 and E10."""
        return self.x + self.R4 * math.log(self.x)


class SkeletonFlags(NamedTuple):
    e7: bool
    e9: bool
    e10: bool
    e11: bool

    def all_pass(self) -> bool:
        return self.e7 and self.e9 and self.e10 and self.e11


@dataclass
class DecorationResult:
    e8: bool
    wn_first: np.ndarray  # final-age first coordinates feeding the weight sum
    n_decorations: int
    n_particles: int
    truncated: bool


@dataclass
class ReplicateOutcome:
    z: float
    log_z: float
    e7: bool
    e8: bool
    e9: bool
    e10: bool
    e11: bool
    stage: str
    n_decorations: int = 0
    n_particles: int = 0
    spine_near_miss: bool = False

    @property
    def flags(self) -> tuple:
        return (self.e7, self.e8, self.e9, self.e10, self.e11)


# ---------------------------------------------------------------------------
# vectorized block engine
# ---------------------------------------------------------------------------

def _sample_spines_block(model, profile, n, nrep, rng):
    """Skeleton draws for a block: broods, spine slots, increments, positions.

    Draw order (brood counts, slots, nominal members, tilted members) is
    fixed so a block is bitwise reproducible from its substream.
    """
    d = model.dim
    sb_counts, sb_cdf = size_biased_support(model.offspring)
    u = rng.random((nrep, n))
    idx = np.minimum(np.searchsorted(sb_cdf, u.ravel(), side="right"),
                     len(sb_counts) - 1)
    counts = sb_counts[idx].reshape(nrep, n)
    uw = rng.random((nrep, n))
    w = np.minimum((uw * counts).astype(np.int64), counts - 1)
    counts_flat = counts.reshape(-1)
    set_offsets = np.zeros(nrep * n + 1, dtype=np.int64)
    np.cumsum(counts_flat, out=set_offsets[1:])
    bones = model.jump.sample(rng, int(set_offsets[-1]))
    tilted = model.jump.sample_tilted(rng, profile.chat2, nrep * n)
    bones[set_offsets[:-1] + w.reshape(-1)] = tilted
    spad = np.zeros((nrep, n + 1, d))
    np.cumsum(tilted.reshape(nrep, n, d), axis=1, out=spad[:, 1:, :])
    return counts, w, bones, set_offsets, spad


def _skeleton_flags_block(spad, counts, bones, set_offsets, params, profile):
    """Gate flags E7, E9, E10, E11 for every replicate of a block."""
    nrep, n1, _ = spad.shape
    n = n1 - 1
    x = params.x
    end = spad[:, n, :].copy()
    end[:, 0] -= x
    r1 = params.R1 * math.log(x)
    e7 = np.einsum("ij,ij->i", end, end) <= r1 * r1
    ceiling = params.ceiling
    first_end = spad[:, n, 0]
    e9 = first_end <= ceiling
    m_hi = n - params.w5
    if m_hi >= 1:
        ks = np.arange(1, m_hi + 1)
        line = ceiling - profile.cbar1 * (n - ks)
        e10 = np.all(spad[:, 1:m_hi + 1, 0] < line[None, :], axis=1)
    else:
        e10 = np.ones(nrep, dtype=bool)
    # E11 examines the brood attached to step k+1 for each constrained k;
    # the sums are max-factored so large tilts cannot overflow.
    m_top = min(m_hi + 1, n)
    if m_hi >= 1 and m_top >= 2:
        y = profile.chat2 * bones[:, 0]
        starts = set_offsets[:-1]
        seg_max = np.maximum.reduceat(y, starts)
        z = np.exp(y - np.repeat(seg_max, np.diff(set_offsets)))
        lse = (seg_max + np.log(np.add.reduceat(z, starts))).reshape(nrep, n)
        ms = np.arange(2, m_top + 1)
        bound = profile.chat2 * (params.e11_offset
                                 + profile.eps1 * (n - (ms - 1)))
        e11 = np.all(lse[:, ms - 1] < bound[None, :], axis=1)
    else:
        e11 = np.ones(nrep, dtype=bool)
    return e7, e9, e10, e11


def _in_ball(pos, x):
    d2 = (pos[:, 0] - x) ** 2
    if pos.shape[1] > 1:
        rest = pos[:, 1:]
        d2 += np.einsum("ij,ij->i", rest, rest)
    return d2 <= 1.0


def _forest_block(model, profile, params, spad, counts, w, bones,
                  set_offsets, active, rng):
    """Grow all window decorations of the active replicates in lockstep.

    Returns per-replicate arrays: the hit/guard verdict for E8, the
    log weight sum over final-age members plus the skeleton endpoint,
    diagnostics, and truncation flags.
    """
    nrep, n1, d = spad.shape
    n = n1 - 1
    x = params.x
    cap = params.decoration_cap
    law = model.offspring

    sn_hit = _in_ball(spad[:, n, :], x)
    guard_fail = _in_ball(spad[:, n - 1, :], x)
    near_miss = np.zeros(nrep, dtype=bool)
    if n >= 3:
        mid = spad[:, 1:n - 1, :].reshape(-1, d)
        nm = _in_ball(mid, x).reshape(nrep, n - 2)
        near_miss = np.any(nm, axis=1)

    m_lo = n - params.w2 + 1
    final_hit = np.zeros(nrep, dtype=bool)
    wband = np.zeros(nrep, dtype=bool)
    n_dec = np.zeros(nrep, dtype=np.int64)
    n_part = np.zeros(nrep, dtype=np.int64)
    trunc = np.zeros(nrep, dtype=bool)
    wmax = np.full(nrep, -np.inf)
    wsum = np.zeros(nrep)

    act = np.flatnonzero(active)
    if act.size:
        counts_flat = counts.reshape(-1)
        w_flat = w.reshape(-1)
        ms = np.arange(m_lo, n + 1, dtype=np.int64)
        sid = (act[:, None] * n + (ms - 1)[None, :]).reshape(-1)
        c_sel = counts_flat[sid]
        s_sel = set_offsets[:-1][sid]
        tot = int(c_sel.sum())
        cum0 = np.zeros(len(c_sel), dtype=np.int64)
        np.cumsum(c_sel[:-1], out=cum0[1:])
        member = (np.arange(tot, dtype=np.int64)
                  - np.repeat(cum0, c_sel) + np.repeat(s_sel, c_sel))
        keep = member != np.repeat(s_sel + w_flat[sid], c_sel)
        member = member[keep]
        mem_rep = np.repeat(np.repeat(act, len(ms)), c_sel)[keep]
        mem_m = np.repeat(np.tile(ms, act.size), c_sel)[keep]
        root_pos = spad[mem_rep, mem_m - 1, :] + bones[member]
        order = np.argsort(mem_m, kind="stable")
        root_pos, mem_rep, mem_m = root_pos[order], mem_rep[order], mem_m[order]
        births = np.searchsorted(mem_m, np.arange(m_lo, n + 2))

        pos = np.empty((0, d))
        rep = np.empty(0, dtype=np.int64)
        for u in range(m_lo, n + 1):
            lo, hi = births[u - m_lo], births[u - m_lo + 1]
            if hi > lo:
                ok = ~(guard_fail[mem_rep[lo:hi]] | trunc[mem_rep[lo:hi]])
                if np.any(ok):
                    pos = np.concatenate([pos, root_pos[lo:hi][ok]])
                    new_rep = mem_rep[lo:hi][ok]
                    rep = np.concatenate([rep, new_rep])
                    n_dec += np.bincount(new_rep, minlength=nrep)
                    n_part += np.bincount(new_rep, minlength=nrep)
            if pos.shape[0] == 0:
                continue
            hit = _in_ball(pos, x)
            if u < n:
                if np.any(hit):
                    guard_fail[np.unique(rep[hit])] = True
                    alive = ~guard_fail[rep]
                    pos, rep = pos[alive], rep[alive]
                if pos.shape[0] == 0:
                    continue
                cnt = sample_offspring(law, rng, size=pos.shape[0])
                born = np.bincount(rep, weights=cnt,
                                   minlength=nrep).astype(np.int64)
                n_part += born
                over = np.flatnonzero(n_part > cap)
                if over.size:
                    trunc[over] = True
                    alive = ~trunc[rep]
                    pos, rep, cnt = pos[alive], rep[alive], cnt[alive]
                if pos.shape[0] == 0:
                    continue
                pos = np.repeat(pos, cnt, axis=0)
                rep = np.repeat(rep, cnt)
                if pos.shape[0]:
                    pos = pos + model.jump.sample(rng, pos.shape[0])
            else:
                if np.any(hit):
                    final_hit[np.unique(rep[hit])] = True
                y = profile.chat2 * pos[:, 0]
                np.maximum.at(wmax, rep, y)
                band = np.abs(pos[:, 0] - x) <= 1.0
                if np.any(band):
                    wband[np.unique(rep[band])] = True

        if pos.shape[0]:
            y = profile.chat2 * pos[:, 0]
            spine_y = profile.chat2 * spad[:, n, 0]
            wmax = np.maximum(wmax, spine_y)
            np.add.at(wsum, rep, np.exp(y - wmax[rep]))
        else:
            spine_y = profile.chat2 * spad[:, n, 0]
            wmax = np.maximum(wmax, spine_y)
        wsum = wsum + np.exp(profile.chat2 * spad[:, n, 0] - wmax)
    else:
        wmax = np.maximum(wmax, profile.chat2 * spad[:, n, 0])
        wsum = wsum + np.exp(profile.chat2 * spad[:, n, 0] - wmax)

    wband |= sn_hit
    e8 = (final_hit | sn_hit) & ~guard_fail
    log_wsum = wmax + np.log(wsum)
    log_z = params.n * profile.psi_chat2 - log_wsum
    return e8, log_z, wband, n_dec, n_part, trunc, near_miss, sn_hit


_STAGE_CODE = {REJECTED_AT_SKELETON: 0, REJECTED_AT_E8: 1,
               ACCEPTED: 2, TRUNCATED: 3}


def _simulate_block(model, profile, params, seed, block_index, nrep, shift,
                    collect):
    """One block of replicates on substream (seed, block_index).

    Returns the block's moment partial plus optional per-replicate arrays.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(block_index,)))
    n = params.n
    counts, w, bones, set_offsets, spad = _sample_spines_block(
        model, profile, n, nrep, rng)
    e7, e9, e10, e11 = _skeleton_flags_block(
        spad, counts, bones, set_offsets, params, profile)
    skeleton = e7 & e9 & e10 & e11
    e8, log_z, wband, n_dec, n_part, trunc, near_miss, _ = _forest_block(
        model, profile, params, spad, counts, w, bones, set_offsets,
        skeleton, rng)

    trunc &= skeleton  # only simulated replicates can truncate
    accepted = skeleton & e8 & ~trunc
    stage = np.zeros(nrep, dtype=np.int8)
    stage[skeleton] = _STAGE_CODE[REJECTED_AT_E8]
    stage[accepted] = _STAGE_CODE[ACCEPTED]
    stage[trunc] = _STAGE_CODE[TRUNCATED]

    z_scaled = np.zeros(nrep)
    z_scaled[accepted] = np.exp(log_z[accepted] + shift)
    valid = ~trunc
    zv = z_scaled[valid]
    cnt = int(zv.size)
    mean = float(zv.mean()) if cnt else 0.0
    m2 = float(np.sum((zv - mean) ** 2)) if cnt else 0.0

    partial = {
        "count": cnt,
        "mean": mean,
        "m2": m2,
        "accepted": int(np.count_nonzero(accepted)),
        "rejected_skeleton": int(np.count_nonzero(~skeleton)),
        "rejected_e8": int(np.count_nonzero(skeleton & ~e8 & ~trunc)),
        "truncated": int(np.count_nonzero(trunc)),
        "decorations": int(n_dec.sum()),
        "particles": int(n_part.sum()),
        "near_miss_accepted": int(np.count_nonzero(accepted & near_miss)),
    }
    if collect:
        flags = np.stack(
            [e7, e8 & skeleton, e9, e10, e11], axis=1)
        partial["arrays"] = {
            "log_z": np.where(accepted, log_z, -np.inf),
            "flags": flags,
            "stage": stage,
            "wband": wband & skeleton & ~trunc,
            "near_miss": near_miss,
        }
    return partial


def _block_worker(args):
    model, profile, params, seed, shift, blocks, total, collect = args
    out = []
    for b in blocks:
        lo = b * _BLOCK
        nrep = min(_BLOCK, total - lo)
        out.append(_simulate_block(model, profile, params, seed, b, nrep,
                                   shift, collect))
    return out


# ---------------------------------------------------------------------------
# batch statistics
# ---------------------------------------------------------------------------

@dataclass
class BatchStats:
    """Streaming moments of the replicate values, with bookkeeping.

    Values are accumulated scaled by exp(shift) so that extremely rare
    targets stay in normal floating range; mean and stderr undo the shift.
    """

    count: int = 0
    mean_scaled: float = 0.0
    m2_scaled: float = 0.0
    shift: float = 0.0
    n_total: int = 0
    accepted: int = 0
    rejected_skeleton: int = 0
    rejected_e8: int = 0
    truncated: int = 0
    decorations: int = 0
    particles: int = 0
    near_miss_accepted: int = 0

    @property
    def mean(self) -> float:
        return self.mean_scaled * math.exp(-self.shift)

    @property
    def log_mean(self) -> float:
        if self.mean_scaled <= 0:
            return -math.inf
        return math.log(self.mean_scaled) - self.shift

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return math.nan
        scaled = math.sqrt(self.m2_scaled / self.count) / math.sqrt(self.count)
        return scaled * math.exp(-self.shift)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.count if self.count else 0.0

    def _absorb(self, p: dict) -> None:
        nb, mb, m2b = p["count"], p["mean"], p["m2"]
        na = self.count
        if nb:
            if na == 0:
                self.mean_scaled, self.m2_scaled = mb, m2b
            else:
                delta = mb - self.mean_scaled
                tot = na + nb
                self.mean_scaled += delta * nb / tot
                self.m2_scaled += m2b + delta * delta * na * nb / tot
            self.count = na + nb
        self.accepted += p["accepted"]
        self.rejected_skeleton += p["rejected_skeleton"]
        self.rejected_e8 += p["rejected_e8"]
        self.truncated += p["truncated"]
        self.decorations += p["decorations"]
        self.particles += p["particles"]
        self.near_miss_accepted += p["near_miss_accepted"]
        self.n_total += p["count"] + p["truncated"]


def run_batch(model: BrwModel, profile: CramerProfile, params: AlgoParams,
              n_replicates: int, seed, threads: int = 1,
              collect: bool = False,
              max_truncated_fraction: float = 1e-3):
    """Average n_replicates independent replicate values.

    Replicates are advanced in fixed-size blocks; block b draws from the
    substream keyed by (seed, b), and block partials are merged in block
    order, so the result is bitwise identical for any thread count.
    Truncated replicates are excluded and counted; the batch fails if they
    exceed max_truncated_fraction of the total.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    shift = params.n * profile.decay_rate
    if shift <= _LOG_SPACE_THRESHOLD:
        shift = 0.0
    n_blocks = (n_replicates + _BLOCK - 1) // _BLOCK
    if threads > 1 and n_blocks > 1:
        spans = np.array_split(np.arange(n_blocks), min(threads, n_blocks))
        tasks = [(model, profile, params, seed, shift, span.tolist(),
                  n_replicates, collect) for span in spans if span.size]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_block_worker, tasks))
        partials = [p for chunk in chunks for p in chunk]
    else:
        partials = _block_worker((model, profile, params, seed, shift,
                                  list(range(n_blocks)), n_replicates,
                                  collect))
    stats = BatchStats(shift=shift)
    for p in partials:
        stats._absorb(p)
    if stats.truncated > max_truncated_fraction * n_replicates:
        raise TruncationError(
            f"{stats.truncated} of {n_replicates} replicates hit the "
            f"population cap (limit {max_truncated_fraction:.1%})")
    if not collect:
        return stats
    arrays = {k: np.concatenate([p["arrays"][k] for p in partials])
              for k in partials[0]["arrays"]}
    return stats, arrays


# ---------------------------------------------------------------------------
# single-replicate operations
# ---------------------------------------------------------------------------

def _path_blocks(path: SpinePath):
    """View one SpinePath as a block of size 1."""
    n = path.n
    return (path.counts.reshape(1, n), path.spine_index.reshape(1, n),
            path.bones, path.offsets, path.positions.reshape(1, n + 1, -1))


def check_skeleton_events(path: SpinePath, params: AlgoParams,
                          profile: CramerProfile) -> SkeletonFlags:
    """Evaluate the four skeleton gates on one sampled path."""
    if path.n != params.n:
        raise ValueError(f"path length {path.n} != horizon {params.n}")
    counts, w, bones, offsets, spad = _path_blocks(path)
    e7, e9, e10, e11 = _skeleton_flags_block(
        spad, counts, bones, offsets, params, profile)
    return SkeletonFlags(bool(e7[0]), bool(e9[0]), bool(e10[0]), bool(e11[0]))


def run_decorations_and_check_E8(path: SpinePath, params: AlgoParams,
                                 model: BrwModel, profile: CramerProfile,
                                 rng: np.random.Generator) -> DecorationResult:
    """Simulate the window decorations of one accepted skeleton.

    For each window step the non-spine brood members seed independent
    nominal trees grown to the horizon; the hit verdict requires a final-age
    member (or the skeleton endpoint) inside the target ball and no recorded
    position inside it at any earlier time, the step-(n-1) skeleton point
    included.
    """
    n, d, x = params.n, path.dim, params.x
    cap = params.decoration_cap
    m_lo = n - params.w2 + 1
    if _in_ball(path.positions[n - 1:n], x)[0]:
        return DecorationResult(e8=False, wn_first=np.zeros(0),
                                n_decorations=0, n_particles=0,
                                truncated=False)
    pos = np.empty((0, d))
    n_dec = 0
    n_part = 0
    sn_hit = bool(_in_ball(path.positions[n:n + 1], x)[0])
    final_first = np.zeros(0)
    hit_final = False
    for u in range(m_lo, n + 1):
        bs = path.bone_set(u)
        others = np.delete(bs.displacements, bs.spine_index, axis=0)
        if others.shape[0]:
            roots = path.positions[u - 1] + others
            pos = np.concatenate([pos, roots])
            n_dec += roots.shape[0]
            n_part += roots.shape[0]
        if pos.shape[0] == 0:
            continue
        hit = _in_ball(pos, x)
        if u < n:
            if np.any(hit):
                return DecorationResult(e8=False, wn_first=np.zeros(0),
                                        n_decorations=n_dec,
                                        n_particles=n_part, truncated=False)
            cnt = sample_offspring(model.offspring, rng, size=pos.shape[0])
            n_part += int(cnt.sum())
            if n_part > cap:
                return DecorationResult(e8=False, wn_first=np.zeros(0),
                                        n_decorations=n_dec,
                                        n_particles=n_part, truncated=True)
            pos = np.repeat(pos, cnt, axis=0)
            if pos.shape[0]:
                pos = pos + model.jump.sample(rng, pos.shape[0])
        else:
            hit_final = bool(np.any(hit))
            final_first = pos[:, 0].copy()
    e8 = hit_final or sn_hit
    return DecorationResult(e8=e8, wn_first=final_first, n_decorations=n_dec,
                            n_particles=n_part, truncated=False)


def compute_Z(wn_first, params: AlgoParams, profile: CramerProfile) -> float:
    """Reciprocal of the max-factored weight sum over the final-age members.

    wn_first must contain the skeleton endpoint's first coordinate; an empty
    sequence under an accepted gate is an internal logic fault.
    """
    y = profile.chat2 * np.asarray(wn_first, dtype=np.float64)
    if y.size == 0:
        raise RuntimeError("weight sum over an empty member list")
    m = float(y.max())
    lse = m + math.log(float(np.sum(np.exp(y - m))))
    return math.exp(params.n * profile.psi_chat2 - lse)


def run_replicate(model: BrwModel, profile: CramerProfile,
                  params: AlgoParams,
                  rng: np.random.Generator) -> ReplicateOutcome:
    """One full replicate: skeleton, gates, decorations, reweighted value."""
    path = sample_spine_path(model, profile, params.n, rng)
    fl = check_skeleton_events(path, params, profile)
    near = bool(np.any(_in_ball(
        path.positions[1:max(params.n - 1, 1)], params.x)))
    if not fl.all_pass():
        return ReplicateOutcome(z=0.0, log_z=-math.inf, e7=fl.e7, e8=False,
                                e9=fl.e9, e10=fl.e10, e11=fl.e11,
                                stage=REJECTED_AT_SKELETON,
                                spine_near_miss=near)
    dec = run_decorations_and_check_E8(path, params, model, profile, rng)
    common = dict(e7=fl.e7, e8=dec.e8, e9=fl.e9, e10=fl.e10, e11=fl.e11,
                  n_decorations=dec.n_decorations,
                  n_particles=dec.n_particles, spine_near_miss=near)
    if dec.truncated:
        return ReplicateOutcome(z=0.0, log_z=-math.inf, stage=TRUNCATED,
                                **common)
    if not dec.e8:
        return ReplicateOutcome(z=0.0, log_z=-math.inf,
                                stage=REJECTED_AT_E8, **common)
    wn = np.concatenate([[path.positions[params.n, 0]], dec.wn_first])
    z = compute_Z(wn, params, profile)
    return ReplicateOutcome(z=z, log_z=math.log(z), stage=ACCEPTED, **common)


# ---------------------------------------------------------------------------
# planning and assembly
# ---------------------------------------------------------------------------

def plan_sample_size(epsilon: float, delta: float, x: float, r: float) -> int:
    """Replicates guaranteeing relative error epsilon with failure prob delta
    for a value whose relative variance grows like x^r."""
    if not 0.0 < epsilon:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if r < 0:
        raise ValueError("r must be nonnegative")
    return math.ceil(10.0 * x ** r * (-math.log(delta)) / epsilon ** 2)


_CDF_SEED_STRIDE = 2654435761  # odd constant keeping per-term seeds distinct


@dataclass
class CdfEstimate:
    value: float
    stderr: float
    terms: list  # BatchStats per offset t = 0 .. K-1


def estimate_cdf(model: BrwModel, profile: CramerProfile, x: float, K: int,
                 n_replicates: int, seed, omega: float = 1.5,
                 threads: int = 1, **param_kw) -> CdfEstimate:
    """Sum of the K deepest pmf terms, with variances added across
    independent batches (one distinct seed per term)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    params_last = AlgoParams.from_model(model, profile, x, t=K - 1,
                                        omega=omega, **param_kw)
    terms = []
    total = 0.0
    var = 0.0
    for t in range(K):
        params = (params_last if t == K - 1 else
                  AlgoParams.from_model(model, profile, x, t=t, omega=omega,
                                        **param_kw))
        stats = run_batch(model, profile, params, n_replicates,
                          seed + t * _CDF_SEED_STRIDE, threads=threads)
        terms.append(stats)
        total += stats.mean
        se = stats.stderr
        if not math.isnan(se):
            var += se * se
    return CdfEstimate(value=total, stderr=math.sqrt(var), terms=terms)
