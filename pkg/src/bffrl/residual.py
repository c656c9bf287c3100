"""Bellman residual and minibatch gradient estimators for residual minimisation.

All estimators consume windows ``(s_m, s_{m+1}[, s_{m+2}])`` cut from a single
trajectory. Only :attr:`Estimator.UNCORRELATED` touches the model: it draws a
genuinely independent second next state and serves as the unbiased oracle.
The borrow-from-the-future (BFF) estimators replace that draw with
``s_m + (s_{m+2} - s_{m+1})``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .env import EnvironmentSpec, circular_diff, resample_next, wrap
from .errors import EstimatorError


class Estimator(str, Enum):
    UNCORRELATED = "uncorrelated"
    SAMPLE_CLONING = "sample_cloning"
    BFF_LOSS = "bff_loss"
    BFF_GRADIENT = "bff_gradient"
    PRIMAL_DUAL = "primal_dual"

    @property
    def is_oracle(self) -> bool:
        return self is Estimator.UNCORRELATED

    @property
    def needs_future(self) -> bool:
        return self in (Estimator.BFF_LOSS, Estimator.BFF_GRADIENT)


@dataclass(frozen=True)
class TransitionWindow:
    s_m: float
    s_m1: float
    s_m2: float | None = None
    r_m: float = 0.0


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Column-wise storage of M windows; ``index`` is the trajectory position m."""

    s: np.ndarray
    s1: np.ndarray
    s2: np.ndarray | None
    r: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.s.size

    @classmethod
    def from_windows(cls, windows: Sequence[TransitionWindow]) -> "WindowBatch":
        if not windows:
            raise EstimatorError("empty batch")
        has_future = all(w.s_m2 is not None for w in windows)
        return cls(
            s=np.array([w.s_m for w in windows]),
            s1=np.array([w.s_m1 for w in windows]),
            s2=np.array([w.s_m2 for w in windows]) if has_future else None,
            r=np.array([w.r_m for w in windows], dtype=float),
            index=np.arange(len(windows)),
        )

    @classmethod
    def from_trajectory(cls, states: np.ndarray, env: EnvironmentSpec, idx, needs_future: bool = False):
        idx = np.asarray(idx, dtype=np.int64)
        s = states[idx]
        return cls(
            s=s,
            s1=states[idx + 1],
            s2=states[idx + 2] if needs_future else None,
            r=env.rewards(s),
            index=idx,
        )

    def sorted(self) -> "WindowBatch":
        order = np.argsort(self.index, kind="stable")
        if np.all(order == np.arange(order.size)):
            return self
        return WindowBatch(self.s[order], self.s1[order],
                           None if self.s2 is None else self.s2[order],
                           self.r[order], self.index[order])


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    grad: np.ndarray
    batch_size: int
    mean_residual: float


def bellman_residual(approx, s, s1, r, gamma: float):
    """``r + gamma V(s1) - V(s)``; vectorised over windows."""
    return np.asarray(r, dtype=float) + gamma * approx.value(s1) - approx.value(s)


def bff_next_state(s, s1, s2, env: EnvironmentSpec):
    """Surrogate independent next state ``s + (s2 - s1)``, mapped back into the domain."""
    if s2 is None:
        raise EstimatorError("BFF window truncated: s_{m+2} is required")
    if env.kind == "continuous":
        return wrap(np.asarray(s, dtype=float) + circular_diff(s2, s1))
    out = (np.asarray(s) + np.asarray(s2) - np.asarray(s1)) % env.n
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def _as_batch(batch) -> WindowBatch:
    if isinstance(batch, WindowBatch):
        return batch
    return WindowBatch.from_windows(list(batch))


def _check_finite(values: np.ndarray, batch: WindowBatch, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimatorError(f"non-finite {what} at window index {int(batch.index[bad[0]])}")


def estimate_gradient(kind: Estimator | str, approx, batch, env: EnvironmentSpec,
                      rng: np.random.Generator | None = None) -> GradientEstimate:
    """Average per-window gradient ``(1/M) sum_m g_m`` for the chosen estimator.

    Windows are reduced in trajectory-index order, so the result does not
    depend on how the batch was permuted.
    """
    kind = Estimator(kind)
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise EstimatorError("empty batch")
    if kind is Estimator.PRIMAL_DUAL:
        raise EstimatorError("primal-dual has no single-gradient form; use primal_dual_step")
    batch = batch.sorted()
    gamma = env.gamma
    M = len(batch)

    if kind is Estimator.SAMPLE_CLONING:
        vals, cache = approx.forward(np.concatenate([batch.s1, batch.s]))
        f1 = batch.r + gamma * vals[:M] - vals[M:]
        _check_finite(f1, batch, "residual")
        weights = np.concatenate([gamma * f1, -f1])
    else:
        if kind is Estimator.UNCORRELATED:
            if rng is None:
                raise EstimatorError("uncorrelated sampling needs a random stream for model resampling")
            sp = resample_next(env, batch.s, rng)
        else:
            sp = bff_next_state(batch.s, batch.s1, batch.s2, env)
        vals, cache = approx.forward(np.concatenate([batch.s1, sp, batch.s]))
        v1, vp, v0 = vals[:M], vals[M:2 * M], vals[2 * M:]
        f1 = batch.r + gamma * v1 - v0
        _check_finite(f1, batch, "residual")
        if kind is Estimator.BFF_LOSS:
            f2 = batch.r + gamma * vp - v0
            _check_finite(f2, batch, "residual")
            half_g = 0.5 * gamma
            weights = np.concatenate([half_g * f2, half_g * f1, -0.5 * (f1 + f2)])
        else:
            weights = np.concatenate([np.zeros(M), gamma * f1, -f1])

    grad = approx.backward(cache, weights)
    grad = grad / M
    if not np.all(np.isfinite(grad)):
        raise EstimatorError(f"non-finite gradient in batch starting at window index {int(batch.index[0])}")
    return GradientEstimate(grad, M, float(np.mean(f1)))


def primal_dual_step(approx_v, approx_y, batch, env: EnvironmentSpec, tau: float, beta: float):
    """One minibatch step of the saddle-point method; returns ``(new_v, new_y)``.

    The dual ascends on ``f y - y^2 / 2`` first; the primal step then uses the
    updated dual values.
    """
    batch = _as_batch(batch).sorted()
    M = len(batch)
    f1 = bellman_residual(approx_v, batch.s, batch.s1, batch.r, env.gamma)
    y_old = np.atleast_1d(approx_y.value(batch.s))
    omega = approx_y.params + (beta / M) * approx_y.vjp(batch.s, f1 - y_old)
    new_y = approx_y.with_params(omega)
    y_new = np.atleast_1d(new_y.value(batch.s))
    states = np.concatenate([batch.s1, batch.s])
    weights = np.concatenate([env.gamma * y_new, -y_new])
    theta = approx_v.params - (tau / M) * approx_v.vjp(states, weights)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(omega))):
        raise EstimatorError(f"non-finite primal-dual update in batch starting at window index {int(batch.index[0])}")
    return approx_v.with_params(theta), new_y
