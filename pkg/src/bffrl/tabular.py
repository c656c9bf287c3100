"""Exact tabular quantities and the per-sample tabular update vectors.

The exact solve, exact residual-minimisation gradient and the finite-sum
expectations below use the transition matrix directly; they are the
reference against which sampled updates are judged.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .env import DiscreteEnvSpec, stationary_distribution
from .errors import ConvergenceError, EstimatorError
from .residual import Estimator


@dataclass(frozen=True)
class TabularSample:
    """Indices of one update: ``i = s_m``, ``j = s_{m+1}``, ``k = s_{m+2}``.

    ``j_alt`` is an independently resampled next state, used only by the
    uncorrelated oracle.
    """

    i: int
    j: int
    k: int | None = None
    j_alt: int | None = None


def exact_value(spec: DiscreteEnvSpec) -> np.ndarray:
    """Solve ``(I - gamma P) V = r``."""
    A = np.eye(spec.n) - spec.gamma * spec.transition
    try:
        v = np.linalg.solve(A, spec.reward_vector)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"Bellman system is singular: {exc}") from exc
    resid = np.max(np.abs(A @ v - spec.reward_vector))
    if not resid < 1e-10:
        raise ConvergenceError(f"Bellman solve residual {resid:.3e} exceeds 1e-10")
    return v


def bellman_operator(spec: DiscreteEnvSpec, v) -> np.ndarray:
    return spec.reward_vector + spec.gamma * spec.transition @ np.asarray(v, dtype=float)


def expected_residual(spec: DiscreteEnvSpec, v) -> np.ndarray:
    return bellman_operator(spec, v) - np.asarray(v, dtype=float)


def brm_objective(spec: DiscreteEnvSpec, v, mu=None) -> float:
    """``1/2 sum_i mu_i (r + gamma P v - v)_i^2``."""
    mu = stationary_distribution(spec) if mu is None else mu
    d = expected_residual(spec, v)
    return 0.5 * float(np.sum(mu * d * d))


def cloning_objective(spec: DiscreteEnvSpec, v, mu=None) -> float:
    """``1/2 sum_i mu_i sum_j P_ij (r_i + gamma v_j - v_i)^2``: what sample cloning minimises."""
    mu = stationary_distribution(spec) if mu is None else mu
    v = np.asarray(v, dtype=float)
    d = spec.reward_vector[:, None] + spec.gamma * v[None, :] - v[:, None]
    return 0.5 * float(np.sum(mu[:, None] * spec.transition * d * d))


def exact_gradient(spec: DiscreteEnvSpec, v, mu=None) -> np.ndarray:
    """``(gamma P - I)^T diag(mu) (r + gamma P v - v)``."""
    mu = stationary_distribution(spec) if mu is None else mu
    B = spec.gamma * spec.transition - np.eye(spec.n)
    return B.T @ (mu * expected_residual(spec, v))


def sample_update(kind: Estimator | str, sample: TabularSample, v, r, gamma: float, n: int) -> dict[int, float]:
    """Sparse update vector ``G_m`` as ``{index: value}``; coinciding indices accumulate."""
    kind = Estimator(kind)
    i, j = sample.i, sample.j
    d = r[i] + gamma * v[j] - v[i]
    G: dict[int, float] = {}

    def add(idx, val):
        G[idx] = G.get(idx, 0.0) + val

    if kind is Estimator.SAMPLE_CLONING:
        add(i, -d)
        add(j, gamma * d)
    elif kind is Estimator.UNCORRELATED:
        if sample.j_alt is None:
            raise EstimatorError("uncorrelated update needs an independently resampled next state")
        add(i, -d)
        add(sample.j_alt, gamma * d)
    elif kind in (Estimator.BFF_GRADIENT, Estimator.BFF_LOSS):
        if sample.k is None:
            raise EstimatorError("BFF window truncated: s_{m+2} is required")
        jp = (i + sample.k - j) % n
        if kind is Estimator.BFF_GRADIENT:
            add(i, -d)
            add(jp, gamma * d)
        else:
            dp = r[i] + gamma * v[jp] - v[i]
            add(i, -0.5 * (d + dp))
            add(j, (gamma / 2) * dp)
            add(jp, (gamma / 2) * d)
    else:
        raise EstimatorError(f"no tabular sample update for {kind.value}")
    return G


def densify(G: dict[int, float], n: int) -> np.ndarray:
    out = np.zeros(n)
    for idx, val in G.items():
        out[idx] += val
    return out


def tabular_primal_dual_update(v, y, sample: TabularSample, r, gamma: float, tau: float, beta: float):
    """Single-sample saddle-point step on tabular primal ``v`` and dual ``y``; returns copies."""
    v = np.array(v, dtype=float)
    y = np.array(y, dtype=float)
    i, j = sample.i, sample.j
    d = r[i] + gamma * v[j] - v[i]
    y[i] = y[i] + beta * (d - y[i])
    yi = y[i]
    v[i] += tau * yi
    v[j] -= tau * gamma * yi
    return v, y


# --------------------------------------------------------------------------
# finite-sum expectations over the sample space (no Monte Carlo)
# --------------------------------------------------------------------------


def _support(P: np.ndarray, i: int):
    return np.flatnonzero(P[i]).tolist()


def expected_update(kind: Estimator | str, spec: DiscreteEnvSpec, v, mu=None) -> np.ndarray:
    """Exact expectation of ``G_m`` under ``s_m ~ mu`` and the chain's transitions."""
    kind = Estimator(kind)
    mu = stationary_distribution(spec) if mu is None else mu
    P, r, g, n = spec.transition, spec.reward_vector, spec.gamma, spec.n
    v = np.asarray(v, dtype=float)
    total = np.zeros(n)
    for i in range(n):
        for j in _support(P, i):
            w_ij = mu[i] * P[i, j]
            if kind is Estimator.SAMPLE_CLONING:
                _accumulate(total, w_ij, sample_update(kind, TabularSample(i, j), v, r, g, n))
            elif kind is Estimator.UNCORRELATED:
                for ja in _support(P, i):
                    _accumulate(total, w_ij * P[i, ja], sample_update(kind, TabularSample(i, j, j_alt=ja), v, r, g, n))
            else:
                for k in _support(P, j):
                    _accumulate(total, w_ij * P[j, k], sample_update(kind, TabularSample(i, j, k=k), v, r, g, n))
    return total


def shifted_kernel(spec: DiscreteEnvSpec, i: int, j: int) -> np.ndarray:
    """Law of the surrogate next state ``(i + k - j) mod n`` with ``k ~ P[j]``."""
    n = spec.n
    q = np.zeros(n)
    for k in _support(spec.transition, j):
        q[(i + k - j) % n] += spec.transition[j, k]
    return q


def expected_uncorrelated_under_shift(spec: DiscreteEnvSpec, v, mu=None) -> np.ndarray:
    """Uncorrelated expectation with the second next state drawn from :func:`shifted_kernel`."""
    mu = stationary_distribution(spec) if mu is None else mu
    P, r, g, n = spec.transition, spec.reward_vector, spec.gamma, spec.n
    v = np.asarray(v, dtype=float)
    total = np.zeros(n)
    for i in range(n):
        for j in _support(P, i):
            q = shifted_kernel(spec, i, j)
            for ja in np.flatnonzero(q).tolist():
                G = sample_update(Estimator.UNCORRELATED, TabularSample(i, j, j_alt=ja), v, r, g, n)
                _accumulate(total, mu[i] * P[i, j] * q[ja], G)
    return total


def _accumulate(total: np.ndarray, w: float, G: dict[int, float]):
    for idx, val in G.items():
        total[idx] += w * val


def iter_samples(spec: DiscreteEnvSpec):
    """All (i, j, k) triples with positive probability, for brute-force checks."""
    P = spec.transition
    for i, j in product(range(spec.n), repeat=2):
        if P[i, j] > 0:
            for k in _support(P, j):
                yield i, j, k
