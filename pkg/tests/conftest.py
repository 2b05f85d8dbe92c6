import math

import numpy as np
import pytest

import spinebrw as sb


@pytest.fixture(scope="session")
def model():
    return sb.reference_model()


@pytest.fixture(scope="session")
def profile(model):
    return sb.derive_profile(model, 1.2)


def make_zero_jump(dim):
    """Degenerate pluggable law (all mass at 0) for deterministic event tests."""
    def sampler(rng, size):
        return np.zeros(dim if size is None else (size, dim))

    def tilted(rng, theta, size):
        return sampler(rng, size)

    return sb.PluggableJump(dim=dim, sampler=sampler,
                            log_mgf=lambda lam: 0.0,
                            dlog_mgf=lambda lam: 0.0,
                            d2log_mgf=lambda lam: 0.0,
                            tilted_sampler=tilted)


def make_laplace(scale=0.5):
    """Symmetric 1-d Laplace jump with analytic log-MGF on (-1/b, 1/b)."""
    b = scale

    def sampler(rng, size):
        out = rng.laplace(0.0, b, size=1 if size is None else size)
        return out.reshape(-1, 1) if size is not None else out

    return sb.PluggableJump(
        dim=1, sampler=sampler,
        log_mgf=lambda lam: -math.log1p(-(b * lam) ** 2),
        dlog_mgf=lambda lam: 2 * b * b * lam / (1 - (b * lam) ** 2),
        d2log_mgf=lambda lam: (2 * b * b * (1 + (b * lam) ** 2)
                               / (1 - (b * lam) ** 2) ** 2),
        mgf_domain=(-1 / b, 1 / b))


def make_two_point():
    """Symmetric +-1 jump; its rate function is finite only on [-1, 1]."""
    def sampler(rng, size):
        out = rng.choice((-1.0, 1.0), size=1 if size is None else size)
        return out.reshape(-1, 1) if size is not None else out

    return sb.PluggableJump(
        dim=1, sampler=sampler,
        log_mgf=lambda lam: math.log(math.cosh(lam)),
        dlog_mgf=math.tanh,
        d2log_mgf=lambda lam: 1.0 / math.cosh(lam) ** 2)


def chisq_stat(observed, expected_probs, total):
    expected = np.asarray(expected_probs) * total
    return float(np.sum((np.asarray(observed) - expected) ** 2 / expected))
