import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bffrl.env import DiscreteEnvSpec, ring_chain, stationary_distribution
from bffrl.errors import EstimatorError
from bffrl.residual import Estimator
from bffrl.tabular import (
    TabularSample,
    bellman_operator,
    brm_objective,
    cloning_objective,
    densify,
    exact_gradient,
    exact_value,
    expected_uncorrelated_under_shift,
    expected_update,
    iter_samples,
    sample_update,
    shifted_kernel,
    tabular_primal_dual_update,
)

from conftest import random_chain

FLIP = [[0.0, 1.0], [1.0, 0.0]]


def fd_grad(fun, v, h=1e-6):
    g = np.zeros_like(v)
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h
        g[k] = (fun(v + e) - fun(v - e)) / (2 * h)
    return g


def test_exact_value_examples(ring):
    assert np.array_equal(exact_value(DiscreteEnvSpec(FLIP, [0, 0], gamma=0.5)), [0, 0])
    assert np.allclose(exact_value(DiscreteEnvSpec(FLIP, [1, 0], gamma=0.5)), [4 / 3, 2 / 3], atol=1e-15)
    v = exact_value(ring)
    assert np.max(np.abs(v - bellman_operator(ring, v))) < 1e-10


def test_exact_value_myopic_limit(ring):
    env = DiscreteEnvSpec(ring.transition, ring.reward_vector, gamma=0.0)
    assert np.array_equal(exact_value(env), ring.reward_vector)


def test_exact_gradient_examples(ring):
    env = DiscreteEnvSpec(FLIP, [1, 0], gamma=0.5)
    assert np.allclose(exact_gradient(env, np.zeros(2)), [-0.5, 0.25], atol=1e-15)
    assert np.max(np.abs(exact_gradient(ring, exact_value(ring)))) < 1e-10


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_exact_gradient_matches_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    env = random_chain(rng, n)
    mu = stationary_distribution(env)
    v = rng.normal(size=n)
    fd = fd_grad(lambda x: brm_objective(env, x, mu), v)
    assert np.allclose(exact_gradient(env, v, mu), fd, atol=1e-6)


def test_sample_update_examples(ring):
    r1 = np.ones(32)
    G = sample_update("sample_cloning", TabularSample(3, 4), np.zeros(32), r1, 0.9, 32)
    assert G == {3: -1.0, 4: 0.9}
    v = np.random.default_rng(0).normal(size=32)
    G = sample_update("bff_gradient", TabularSample(0, 1, 0), v, ring.reward_vector, 0.9, 32)
    d = ring.reward_vector[0] + 0.9 * v[1] - v[0]
    assert set(G) == {0, 31}
    assert G[0] == -d and G[31] == pytest.approx(0.9 * d, abs=0)


def test_cloning_nonzero_at_fixed_point(ring):
    vstar = exact_value(ring)
    nonzero = [any(abs(x) > 1e-8 for x in sample_update("sample_cloning", TabularSample(i, j), vstar,
                                                          ring.reward_vector, 0.9, 32).values())
               for i, j, _ in iter_samples(ring)]
    assert any(nonzero)


def test_bff_loss_formula_and_symmetry(ring):
    rng = np.random.default_rng(1)
    v, r = rng.normal(size=32), ring.reward_vector
    i, j, k = 5, 6, 5
    jp = (i + k - j) % 32
    d, dp = r[i] + 0.9 * v[j] - v[i], r[i] + 0.9 * v[jp] - v[i]
    G = densify(sample_update("bff_loss", TabularSample(i, j, k), v, r, 0.9, 32), 32)
    expect = np.zeros(32)
    expect[i] -= 0.5 * (d + dp)
    expect[j] += 0.45 * dp
    expect[jp] += 0.45 * d
    assert np.allclose(G, expect, atol=1e-15)
    # averaging the gradient form with roles j <-> j' swapped reproduces the loss form
    a = densify(sample_update("bff_gradient", TabularSample(i, j, k), v, r, 0.9, 32), 32)
    swapped = np.zeros(32)
    swapped[i] -= dp
    swapped[j] += 0.9 * dp
    assert np.allclose(G, 0.5 * (a + swapped), atol=1e-15)


def test_coinciding_indices_accumulate():
    r = np.array([1.0, 0.0, 0.0])
    G = sample_update("sample_cloning", TabularSample(0, 0), np.zeros(3), r, 0.9, 3)
    assert G == {0: pytest.approx(-1.0 + 0.9)}


def test_missing_indices_fault():
    with pytest.raises(EstimatorError, match="truncated"):
        sample_update("bff_gradient", TabularSample(0, 1), np.zeros(3), np.zeros(3), 0.9, 3)
    with pytest.raises(EstimatorError):
        sample_update("uncorrelated", TabularSample(0, 1), np.zeros(3), np.zeros(3), 0.9, 3)
    with pytest.raises(EstimatorError):
        sample_update("primal_dual", TabularSample(0, 1), np.zeros(3), np.zeros(3), 0.9, 3)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_uncorrelated_finite_sum_is_exact_gradient(seed, n):
    rng = np.random.default_rng(seed)
    env = random_chain(rng, n, density=0.6)
    v = rng.normal(size=n)
    mu = stationary_distribution(env)
    assert np.allclose(expected_update("uncorrelated", env, v, mu), exact_gradient(env, v, mu), rtol=0, atol=1e-12)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_cloning_finite_sum_is_cloning_gradient(seed, n):
    rng = np.random.default_rng(seed)
    env = random_chain(rng, n)
    v = rng.normal(size=n)
    mu = stationary_distribution(env)
    fd = fd_grad(lambda x: cloning_objective(env, x, mu), v)
    assert np.allclose(expected_update("sample_cloning", env, v, mu), fd, atol=1e-5)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_bff_is_uncorrelated_under_shifted_kernel(seed, n):
    rng = np.random.default_rng(seed)
    env = random_chain(rng, n, density=0.7)
    v = rng.normal(size=n)
    mu = stationary_distribution(env)
    a = expected_update("bff_gradient", env, v, mu)
    b = expected_uncorrelated_under_shift(env, v, mu)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_shifted_kernel_is_a_distribution(ring):
    for i, j in [(0, 1), (5, 4), (31, 0)]:
        q = shifted_kernel(ring, i, j)
        assert q.sum() == pytest.approx(1.0, abs=1e-15) and q.min() >= 0
    # k ~ P[11] lands on 10 or 12, so j' = 10 + k - 11 is 9 or 11
    q = shifted_kernel(ring, 10, 11)
    assert np.allclose(q[[9, 11]], ring.transition[11, [10, 12]]) and q.sum() == q[9] + q[11]


def test_bff_expectation_on_ring_differs_from_cloning(ring):
    v = np.random.default_rng(4).normal(size=32)
    mu = stationary_distribution(ring)
    unc = expected_update("uncorrelated", ring, v, mu)
    bff = expected_update("bff_gradient", ring, v, mu)
    clone = expected_update("sample_cloning", ring, v, mu)
    assert np.linalg.norm(bff - unc) < np.linalg.norm(clone - unc)


def test_fixed_points_of_expected_updates(ring):
    # zeros of E[G]: the oracle lands on V*, BFF near it, cloning far away
    mu = stationary_distribution(ring)
    vstar = exact_value(ring)

    def root(kind):
        b = expected_update(kind, ring, np.zeros(32), mu)
        A = np.column_stack([expected_update(kind, ring, e, mu) - b for e in np.eye(32)])
        return np.linalg.solve(A, -b)

    rel = {k: np.linalg.norm(root(k) - vstar) / np.linalg.norm(vstar) for k in
           ("uncorrelated", "bff_loss", "bff_gradient", "sample_cloning")}
    assert rel["uncorrelated"] < 1e-10
    assert rel["bff_loss"] < 0.5 * rel["sample_cloning"]
    assert rel["bff_gradient"] < 0.5 * rel["sample_cloning"]
    assert rel["sample_cloning"] > 0.05


def test_primal_dual_update_examples():
    r = np.array([1.0, 0.5, 0.0])
    v0 = np.array([0.2, -0.1, 0.3])
    v, y = tabular_primal_dual_update(v0, np.zeros(3), TabularSample(0, 1), r, 0.9, 0.1, 0.0)
    assert np.array_equal(v, v0) and np.array_equal(y, np.zeros(3))
    d = r[0] + 0.9 * v0[1] - v0[0]
    y = np.zeros(3)
    for k in range(1, 8):
        _, y = tabular_primal_dual_update(v0, y, TabularSample(0, 1), r, 0.9, 0.0, 0.5)
        assert y[0] == pytest.approx(d * (1 - 0.5 ** k), abs=1e-15)
    v, y = tabular_primal_dual_update(v0, np.zeros(3), TabularSample(0, 1), r, 0.9, 0.1, 0.5)
    assert v[0] == pytest.approx(v0[0] + 0.1 * y[0]) and v[1] == pytest.approx(v0[1] - 0.09 * y[0])
    v, y = tabular_primal_dual_update(v0, np.zeros(3), TabularSample(2, 2), r, 0.9, 0.1, 0.5)
    assert v[2] == pytest.approx(v0[2] + 0.1 * y[2] * (1 - 0.9))


def test_iter_samples_weights_sum_to_one(ring):
    mu = stationary_distribution(ring)
    P = ring.transition
    total = sum(mu[i] * P[i, j] * P[j, k] for i, j, k in iter_samples(ring))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_kind_strings_accepted():
    assert Estimator("bff_loss") is Estimator.BFF_LOSS
    assert ring_chain(4).n == 4
