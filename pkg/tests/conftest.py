import numpy as np
import pytest

from bffrl.env import ContinuousEnvSpec, DiscreteEnvSpec, ring_chain


@pytest.fixture
def ring():
    return ring_chain()


@pytest.fixture
def sde():
    return ContinuousEnvSpec()


def random_chain(rng, n, gamma=0.9, density=1.0):
    """Random row-stochastic chain; every row keeps at least one entry."""
    P = rng.random((n, n))
    if density < 1.0:
        mask = rng.random((n, n)) < density
        mask[np.arange(n), rng.integers(0, n, n)] = True
        P = P * mask
    P /= P.sum(axis=1, keepdims=True)
    # exact renormalisation leaves rows within a few ulps of 1
    return DiscreteEnvSpec(P, rng.normal(size=n), gamma=gamma)


@pytest.fixture(scope="session")
def reference_cache(request):
    """Directory shared across test sessions for the slow trained references."""
    return request.config.cache.mkdir("bffrl-references")


@pytest.fixture(scope="session")
def desk_reference(reference_cache):
    """Oracle-trained continuous reference at the default desk scale (cached on disk)."""
    from bffrl.trainer import cached_reference

    return cached_reference(ContinuousEnvSpec(), reference_cache, length=1_000_000, tau=0.01,
                            batch_size=1000, epochs=3, seed=12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
