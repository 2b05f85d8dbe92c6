import dataclasses
import math

import numpy as np
import pytest

import spinebrw as sb

from conftest import make_zero_jump


def make_params(model, profile, x, **kw):
    return sb.AlgoParams.from_model(model, profile, x, **kw)


# ---------------------------------------------------------------------------
# parameter recipe
# ---------------------------------------------------------------------------

def test_params_recipe(model, profile):
    for omega in (1.0, 1.25, 1.5, 2.0):
        for x in (15.0, 50.0, 200.0):
            R4 = model.dim / (2 * profile.chat2)
            lnx = math.log(x)
            if math.ceil(omega ** 2 * R4 * lnx) > math.floor(x / profile.chat1):
                with pytest.raises(ValueError):
                    make_params(model, profile, x, omega=omega)
                continue
            p = make_params(model, profile, x, omega=omega)
            assert p.R4 == pytest.approx(R4, abs=1e-15)
            assert p.R5 == pytest.approx(omega * R4, abs=1e-14)
            assert p.R2 == pytest.approx(omega ** 2 * R4, abs=1e-14)
            assert p.R3 == p.R2
            assert p.R1 == pytest.approx(omega ** 3 * R4, abs=1e-13)
            lnx = math.log(x)
            assert p.w2 == math.ceil(p.R2 * lnx)
            assert p.w3 == math.ceil(p.R3 * lnx)
            assert p.w5 == math.floor(p.R5 * lnx)
            assert p.n == math.floor(x / profile.chat1)
            if omega > 1:
                assert p.R1 > p.R2 == p.R3 >= p.R5 > p.R4


def test_params_validation(model, profile):
    with pytest.raises(ValueError):
        make_params(model, profile, 0.5)
    with pytest.raises(ValueError):
        make_params(model, profile, 20.0, t=-1)
    with pytest.raises(ValueError):
        make_params(model, profile, 20.0, omega=0.9)
    # horizon shorter than the decoration window
    with pytest.raises(ValueError):
        make_params(model, profile, 20.0, t=20)
    with pytest.raises(ValueError):
        make_params(model, profile, 6.0, omega=2.0)


# ---------------------------------------------------------------------------
# skeleton gates against a literal reimplementation
# ---------------------------------------------------------------------------

def synthetic_path(rng, n, dim, max_children=4):
    counts = rng.integers(1, max_children + 1, size=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    bones = rng.normal(0.4, 1.3, size=(offsets[-1], dim))
    w = rng.integers(0, counts)
    positions = np.zeros((n + 1, dim))
    np.cumsum(bones[offsets[:-1] + w], axis=0, out=positions[1:])
    return sb.SpinePath(n=n, dim=dim, positions=positions, counts=counts,
                        spine_index=w, bones=bones, offsets=offsets)


def flags_by_definition(path, params, profile):
    """Plain-loop transcription of the four gate definitions."""
    n, x = params.n, params.x
    lnx = math.log(x)
    center = np.zeros(path.dim)
    center[0] = x
    e7 = np.linalg.norm(path.positions[n] - center) <= params.R1 * lnx
    e9 = path.positions[n, 0] <= x + params.R4 * lnx
    e10 = True
    for k in range(1, n - params.w5 + 1):
        if not (path.positions[k, 0]
                < x + params.R4 * lnx - profile.cbar1 * (n - k)):
            e10 = False
    e11 = True
    for k in range(1, n - params.w5 + 1):
        if k + 1 > n:
            continue
        bs = path.bone_set(k + 1)
        total = sum(math.exp(profile.chat2 * b)
                    for b in bs.displacements[:, 0])
        bound = math.exp(profile.chat2
                         * (params.e11_offset + profile.eps1 * (n - k)))
        if not total < bound:
            e11 = False
    return e7, e9, e10, e11


def test_skeleton_gates_match_definition(model, profile):
    rng = np.random.default_rng(314)
    params = make_params(model, profile, 12.0)
    for trial in range(60):
        path = synthetic_path(rng, params.n, model.dim)
        got = sb.check_skeleton_events(path, params, profile)
        want = flags_by_definition(path, params, profile)
        assert tuple(got) == want, f"trial {trial}: {tuple(got)} != {want}"


def test_skeleton_gates_match_definition_tiny_offset(model, profile):
    # offset 0 recovers the bare gate; exercise E11 rejections too
    rng = np.random.default_rng(7000)
    base = make_params(model, profile, 12.0)
    params = dataclasses.replace(base, e11_offset=0.0)
    rejected = 0
    for _ in range(60):
        path = synthetic_path(rng, params.n, model.dim)
        got = sb.check_skeleton_events(path, params, profile)
        want = flags_by_definition(path, params, profile)
        assert tuple(got) == want
        rejected += not got.e11
    assert rejected > 0


def test_constant_velocity_path_keeps_gate_open(model, profile):
    # straight path at the biased speed satisfies the corridor constraint
    # for every checked step (independent scan)
    params = make_params(model, profile, 100.0)
    n = params.n
    positions = np.zeros((n + 1, 3))
    positions[:, 0] = profile.chat1 * np.arange(n + 1)
    counts = np.ones(n, dtype=np.int64)
    path = sb.SpinePath(n=n, dim=3, positions=positions, counts=counts,
                        spine_index=np.zeros(n, dtype=np.int64),
                        bones=np.tile([profile.chat1, 0.0, 0.0], (n, 1)),
                        offsets=np.arange(n + 1, dtype=np.int64))
    lnx = math.log(100.0)
    for k in range(1, n - params.w5 + 1):
        assert (profile.chat1 * k
                < 100.0 + params.R4 * lnx - profile.cbar1 * (n - k))
    assert sb.check_skeleton_events(path, params, profile).e10


def test_endpoint_gate_boundaries(model, profile):
    params = make_params(model, profile, 20.0)
    n = params.n
    counts = np.ones(n, dtype=np.int64)
    base = dict(n=n, dim=3, counts=counts,
                spine_index=np.zeros(n, dtype=np.int64),
                bones=np.zeros((n, 3)), offsets=np.arange(n + 1, dtype=np.int64))
    # endpoint dead center: inside both endpoint gates
    pos = np.zeros((n + 1, 3))
    pos[n, 0] = 20.0
    fl = sb.check_skeleton_events(sb.SpinePath(positions=pos, **base),
                                  params, profile)
    assert fl.e7 and fl.e9
    # first coordinate just past the ceiling
    pos2 = pos.copy()
    pos2[n, 0] = 20.0 + params.R4 * math.log(20.0) + 0.1
    fl2 = sb.check_skeleton_events(sb.SpinePath(positions=pos2, **base),
                                   params, profile)
    assert not fl2.e9


# ---------------------------------------------------------------------------
# hit verdict (E8) on deterministic decorations
# ---------------------------------------------------------------------------

def zero_jump_setup(x=9.0):
    """Model whose jumps are all zero: decorations stay at their roots."""
    model = sb.BrwModel(dim=2, offspring=sb.OffspringLaw({2: 1.0}),
                        jump=make_zero_jump(2))
    profile = sb.CramerProfile(rho=2.0, log_rho=math.log(2.0), c1=0.4,
                               chat1=0.9, chat2=1.0, I_chat1=1.0,
                               psi_chat2=math.log(2.0), cbar1=0.5, eps1=0.05)
    params = sb.AlgoParams(x=x, t=0, n=10, omega=1.5, R1=50.0, R2=5.0,
                           R3=5.0, R4=2.0, R5=3.0, w2=4, w3=4, w5=2,
                           e11_offset=20.0, decoration_cap=10 ** 6)
    return model, profile, params


def path_with_bones(params, spine_first, bone_first):
    """Two-member broods: spine member plus one fixed decoration root."""
    n = params.n
    counts = np.full(n, 2, dtype=np.int64)
    offsets = np.arange(0, 2 * n + 1, 2, dtype=np.int64)
    w = np.zeros(n, dtype=np.int64)
    bones = np.zeros((2 * n, 2))
    positions = np.zeros((n + 1, 2))
    positions[1:, 0] = np.cumsum(spine_first)
    bones[0::2, 0] = spine_first          # member 0 continues the skeleton
    bones[1::2, 0] = bone_first           # member 1 roots a decoration
    return sb.SpinePath(n=n, dim=2, positions=positions, counts=counts,
                        spine_index=w, bones=bones, offsets=offsets)


def test_hit_verdict_via_spine_endpoint_only(model, profile):
    # single-child broods leave no decorations; the endpoint alone decides
    m = sb.BrwModel(dim=2, offspring=sb.OffspringLaw({1: 1.0}),
                    jump=make_zero_jump(2))
    _, prof, params = zero_jump_setup()
    n = params.n
    inc = np.zeros(n)
    inc[-1] = 9.0  # jump straight into the ball at the last step
    counts = np.ones(n, dtype=np.int64)
    positions = np.zeros((n + 1, 2))
    positions[1:, 0] = np.cumsum(inc)
    bones = np.zeros((n, 2))
    bones[:, 0] = inc
    path = sb.SpinePath(n=n, dim=2, positions=positions, counts=counts,
                        spine_index=np.zeros(n, dtype=np.int64),
                        bones=bones, offsets=np.arange(n + 1, dtype=np.int64))
    dec = sb.run_decorations_and_check_E8(path, params, m, prof,
                                          np.random.default_rng(0))
    assert dec.e8 and dec.n_decorations == 0


def test_hit_verdict_final_age_decoration():
    model, prof, params = zero_jump_setup()
    n, x = params.n, params.x
    spine = np.zeros(n)
    bone = np.zeros(n)
    bone[n - 1] = x  # decoration born at time n sits in the ball at age 0
    path = path_with_bones(params, spine, bone)
    dec = sb.run_decorations_and_check_E8(path, params, model, prof,
                                          np.random.default_rng(0))
    assert dec.e8
    assert np.any(np.abs(dec.wn_first - x) <= 1.0)


def test_hit_verdict_blocked_by_earlier_decoration():
    # the same in-ball root one step earlier is recorded at time n-1,
    # which vetoes the verdict regardless of final-age hits
    model, prof, params = zero_jump_setup()
    n, x = params.n, params.x
    spine = np.zeros(n)
    bone = np.zeros(n)
    bone[n - 2] = x
    bone[n - 1] = x
    path = path_with_bones(params, spine, bone)
    dec = sb.run_decorations_and_check_E8(path, params, model, prof,
                                          np.random.default_rng(0))
    assert not dec.e8


def test_hit_verdict_blocked_by_penultimate_spine_point():
    model, prof, params = zero_jump_setup()
    n, x = params.n, params.x
    spine = np.zeros(n)
    spine[n - 2] = x      # skeleton reaches the ball at time n-1
    spine[n - 1] = 0.0
    bone = np.zeros(n)
    bone[n - 1] = -x      # irrelevant decoration
    path = path_with_bones(params, spine, bone)
    path.positions[:, 0] = np.concatenate([[0.0], np.cumsum(spine)])
    dec = sb.run_decorations_and_check_E8(path, params, model, prof,
                                          np.random.default_rng(0))
    assert not dec.e8


def test_truncated_decorations_are_flagged():
    model, prof, params = zero_jump_setup()
    small = dataclasses.replace(params, decoration_cap=3)
    spine = np.zeros(params.n)
    bone = np.full(params.n, -50.0)  # far away, but they branch every step
    path = path_with_bones(small, spine, bone)
    dec = sb.run_decorations_and_check_E8(path, small, model, prof,
                                          np.random.default_rng(0))
    assert dec.truncated


# ---------------------------------------------------------------------------
# the reweighted value
# ---------------------------------------------------------------------------

def test_compute_z_single_member(model, profile):
    params = make_params(model, profile, 20.0)
    z = sb.compute_Z([20.0], params, profile)
    want = math.exp(params.n * profile.psi_chat2 - profile.chat2 * 20.0)
    assert z == pytest.approx(want, rel=1e-12)
    assert z == pytest.approx(0.0992175472766373, rel=1e-10)


def test_compute_z_two_identical_members_halve(model, profile):
    params = make_params(model, profile, 20.0)
    one = sb.compute_Z([20.0], params, profile)
    two = sb.compute_Z([20.0, 20.0], params, profile)
    assert two == pytest.approx(one / 2.0, rel=1e-14)


def test_compute_z_upper_bound_with_ball_member(model, profile):
    params = make_params(model, profile, 20.0)
    rng = np.random.default_rng(6)
    for _ in range(50):
        members = 19.0 + rng.random(5) * 3.0
        z = sb.compute_Z(members, params, profile)
        bound = math.exp(params.n * profile.psi_chat2
                         - profile.chat2 * (20.0 - 1.0))
        assert z <= bound * (1 + 1e-12)


def test_compute_z_logsumexp_stability(model, profile):
    params = make_params(model, profile, 20.0)
    # values this large overflow naive exp; the max-factored path is finite
    z = sb.compute_Z([1500.0, 1490.0], params, profile)
    manual = params.n * profile.psi_chat2 - (profile.chat2 * 1500.0 + math.log1p(
        math.exp(profile.chat2 * (1490.0 - 1500.0))))
    assert z == pytest.approx(math.exp(manual), rel=1e-12)
    # where naive summation is safe the two agree to 1e-12 relative
    members = [18.0, 19.5, 21.0]
    naive = 1.0 / sum(math.exp(profile.chat2 * m - params.n * profile.psi_chat2)
                      for m in members)
    assert sb.compute_Z(members, params, profile) == pytest.approx(naive, rel=1e-12)


def test_compute_z_empty_is_a_fault(model, profile):
    params = make_params(model, profile, 20.0)
    with pytest.raises(RuntimeError):
        sb.compute_Z([], params, profile)


# ---------------------------------------------------------------------------
# replicates and batches
# ---------------------------------------------------------------------------

def test_replicate_gate_soundness(model, profile):
    params = make_params(model, profile, 10.0)
    bound = math.exp(-params.n * profile.decay_rate
                     + profile.chat2 * (1 + params.R4 * math.log(params.x)))
    seen_accept = 0
    for j in range(3000):
        rng = np.random.default_rng((202, j))
        out = sb.run_replicate(model, profile, params, rng)
        if out.z > 0:
            assert all(out.flags)
            assert out.stage == "accepted"
            assert out.z <= bound
            seen_accept += 1
        else:
            assert not all(out.flags)
    assert seen_accept > 0


def test_rejection_stages(model, profile):
    params = make_params(model, profile, 10.0)
    stages = set()
    for j in range(2000):
        out = sb.run_replicate(model, profile, params,
                               np.random.default_rng((55, j)))
        stages.add(out.stage)
    assert "rejected_at_E8" in stages
    assert "accepted" in stages


def test_run_batch_deterministic_and_thread_invariant(model, profile):
    params = make_params(model, profile, 15.0)
    a = sb.run_batch(model, profile, params, 4000, seed=5, threads=1)
    b = sb.run_batch(model, profile, params, 4000, seed=5, threads=1)
    c = sb.run_batch(model, profile, params, 4000, seed=5, threads=2)
    assert a.mean == b.mean == c.mean
    assert a.m2_scaled == b.m2_scaled == c.m2_scaled
    assert a.accepted == c.accepted


def test_run_batch_single_replicate_stderr_flagged(model, profile):
    params = make_params(model, profile, 15.0)
    stats = sb.run_batch(model, profile, params, 1, seed=5)
    assert math.isnan(stats.stderr)
    assert stats.count == 1


def test_run_batch_collect_matches_stats(model, profile):
    params = make_params(model, profile, 12.0)
    stats, arrays = sb.run_batch(model, profile, params, 5000, seed=8,
                                 collect=True)
    z = np.where(np.isfinite(arrays["log_z"]), np.exp(arrays["log_z"]), 0.0)
    valid = arrays["stage"] != 3
    assert stats.mean == pytest.approx(z[valid].mean(), rel=1e-12)
    assert stats.accepted == int(np.sum(arrays["stage"] == 2))
    # gate soundness over the whole batch
    all_flags = arrays["flags"].all(axis=1)
    assert np.array_equal(z > 0, all_flags & valid)
    # every accepted replicate carries a weight member near the target
    assert np.all(arrays["wband"][arrays["stage"] == 2])


def test_run_batch_truncation_failure(model, profile):
    params = dataclasses.replace(make_params(model, profile, 12.0),
                                 decoration_cap=2)
    with pytest.raises(sb.TruncationError):
        sb.run_batch(model, profile, params, 2000, seed=3)


def test_estimator_matches_brute_force_small_x(model, profile):
    # two independent routes to the same probability
    params = make_params(model, profile, 10.0)
    stats = sb.run_batch(model, profile, params, 30_000, seed=909, threads=2)
    brute = sb.fpt_pmf(model, 10.0, params.n, 120_000, seed=910, threads=2)
    p, se_b = brute.pmf(params.n), brute.pmf_stderr(params.n)
    gap = abs(stats.mean - p)
    combined = math.hypot(stats.stderr, se_b)
    assert gap <= 4 * combined, (stats.mean, p, combined)


def test_plan_sample_size_values():
    assert sb.plan_sample_size(0.1, 0.05, 1.0, 0.0) == 2996
    assert sb.plan_sample_size(1.0, math.exp(-1.0), 1.0, 0.0) == 10
    assert sb.plan_sample_size(0.1, 0.05, 100.0, 0.5) == 29958
    with pytest.raises(ValueError):
        sb.plan_sample_size(0.0, 0.5, 10.0, 1.0)
    with pytest.raises(ValueError):
        sb.plan_sample_size(0.1, 1.5, 10.0, 1.0)


def test_estimate_cdf_first_term_equals_single_batch(model, profile):
    params = make_params(model, profile, 12.0)
    single = sb.run_batch(model, profile, params, 3000, seed=31)
    cdf = sb.estimate_cdf(model, profile, 12.0, 1, 3000, seed=31)
    assert cdf.value == single.mean
    assert cdf.stderr == single.stderr


def test_estimate_cdf_monotone_in_depth(model, profile):
    v1 = sb.estimate_cdf(model, profile, 12.0, 1, 3000, seed=77).value
    v3 = sb.estimate_cdf(model, profile, 12.0, 3, 3000, seed=77).value
    assert v3 >= v1


def test_estimate_cdf_depth_validation(model, profile):
    with pytest.raises(ValueError):
        sb.estimate_cdf(model, profile, 12.0, 0, 100, seed=1)
    # K too deep: horizon of the last term falls below the window
    with pytest.raises(ValueError):
        sb.estimate_cdf(model, profile, 12.0, 12, 100, seed=1)


def test_near_miss_diagnostic():
    model, prof, params = zero_jump_setup()
    n, x = params.n, params.x
    m = sb.BrwModel(dim=2, offspring=sb.OffspringLaw({1: 1.0}),
                    jump=make_zero_jump(2))
    inc = np.zeros(n)
    inc[0] = x    # sits in the ball from step 1 ...
    inc[1] = -x   # ... then leaves; near miss, not a guard failure
    inc[-1] = x
    counts = np.ones(n, dtype=np.int64)
    positions = np.zeros((n + 1, 2))
    positions[1:, 0] = np.cumsum(inc)
    bones = np.zeros((n, 2))
    bones[:, 0] = inc
    path = sb.SpinePath(n=n, dim=2, positions=positions, counts=counts,
                        spine_index=np.zeros(n, dtype=np.int64),
                        bones=bones, offsets=np.arange(n + 1, dtype=np.int64))
    flags = sb.check_skeleton_events(path, params, prof)
    dec = sb.run_decorations_and_check_E8(path, params, m, prof,
                                          np.random.default_rng(0))
    assert dec.e8  # the early visit is not checked by the verdict
