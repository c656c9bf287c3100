"""Monte-Carlo estimates of the residual-minimisation objective J, the BFF
surrogate J_hat, and their gap, plus the eps-sweep that fits the gap's
power law.

Outer states come from independent chains run long enough to forget their
uniform start, so outer samples are i.i.d. draws from the chain's own
stationary law at the current eps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import (
    TWO_PI,
    ContinuousEnvSpec,
    EnvironmentSpec,
    advance,
    jump,
    make_rng,
)
from .errors import InsufficientSamplesError, SpecError
from .residual import bff_next_state

CHUNK = 20_000
BURN_IN_TIME = 20.0  # continuous time units; the default chain relaxes in O(1)
DISCRETE_BURN_IN = 500


@dataclass(frozen=True)
class BiasEstimate:
    j_value: float
    jhat_value: float
    gap: float
    std_err: float
    n_outer: int
    n_inner: int


@dataclass(frozen=True)
class MeanEstimate:
    value: float
    std_err: float
    n: int


@dataclass(frozen=True, eq=False)
class SweepResult:
    eps: np.ndarray
    gaps: np.ndarray
    std_errs: np.ndarray
    slope: float
    intercept: float

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eps", "gap", "std_err", "abs_gap"])
            for e, g, s in zip(self.eps.tolist(), self.gaps.tolist(), self.std_errs.tolist()):
                w.writerow([repr(e), repr(g), repr(s), repr(abs(g))])
        return path

    def summary(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "eps": self.eps.tolist()}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path


def _noise(env: EnvironmentSpec, rng: np.random.Generator, size):
    if env.kind == "continuous":
        return rng.standard_normal(size)
    return rng.random(size)


def _transition(env: EnvironmentSpec, s, noise):
    if env.kind == "continuous":
        return advance(env, s, noise)
    return jump(env, s, noise)


def stationary_states(env: EnvironmentSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent draws from (approximately) the chain's stationary law."""
    if env.kind == "continuous":
        s = TWO_PI * (1.0 - rng.random(n))
        steps = 0 if env.epsilon == 0 else int(math.ceil(BURN_IN_TIME / env.epsilon))
    else:
        s = rng.integers(0, env.n, size=n)
        steps = DISCRETE_BURN_IN
    for _ in range(steps):
        s = _transition(env, s, _noise(env, rng, n))
    return s


def _residual(env, approx, s, s_next, v_s=None):
    v_s = approx.value(s) if v_s is None else v_s
    return env.rewards(s) + env.gamma * approx.value(s_next) - v_s


def _chunks(total: int):
    done = 0
    while done < total:
        k = min(CHUNK, total - done)
        yield k
        done += k


def estimate_J(env: EnvironmentSpec, approx, n_outer: int, n_inner: int = 64, seed: int = 0) -> MeanEstimate:
    """Unbiased estimate of ``1/2 E[(E[f | s])^2]``.

    The square of the inner conditional mean is estimated by the pair
    U-statistic ``((sum f)^2 - sum f^2) / (n (n - 1))``.
    """
    if n_inner < 2:
        raise SpecError("n_inner must be at least 2 for the pair estimator")
    rng = make_rng(seed, "bias")
    outer = stationary_states(env, n_outer, rng)
    per_outer = np.empty(n_outer)
    pos = 0
    for k in _chunks(n_outer):
        s = outer[pos:pos + k]
        s_rep = np.repeat(s, n_inner)
        s_next = _transition(env, s_rep, _noise(env, rng, s_rep.size))
        f = _residual(env, approx, s_rep, s_next).reshape(k, n_inner)
        tot = f.sum(axis=1)
        sq = (f * f).sum(axis=1)
        per_outer[pos:pos + k] = 0.5 * (tot * tot - sq) / (n_inner * (n_inner - 1))
        pos += k
    return _mean(per_outer)


def estimate_Jhat(env: EnvironmentSpec, approx, n_samples: int, seed: int = 0) -> MeanEstimate:
    """Estimate ``1/2 E[f(s, s1) f(s, s + (s2 - s1))]`` from simulated two-step windows."""
    rng = make_rng(seed, "bias")
    outer = stationary_states(env, n_samples, rng)
    vals = np.empty(n_samples)
    pos = 0
    for k in _chunks(n_samples):
        s = outer[pos:pos + k]
        s1 = _transition(env, s, _noise(env, rng, k))
        s2 = _transition(env, s1, _noise(env, rng, k))
        sp = bff_next_state(s, s1, s2, env)
        v_s = approx.value(s)
        vals[pos:pos + k] = 0.5 * _residual(env, approx, s, s1, v_s) * _residual(env, approx, s, sp, v_s)
        pos += k
    return _mean(vals)


def estimate_gap(env: EnvironmentSpec, approx, n_outer: int, n_inner: int = 10, seed: int = 0) -> BiasEstimate:
    """Coupled estimate of ``J_hat - J``.

    For each draw ``s1 = step(s; xi1)``, ``s2 = step(s1; xi2)`` and the
    genuinely independent copy ``s' = step(s; xi2)`` share the noise ``xi2``.
    ``1/2 f(s,s1) f(s,s')`` is unbiased for J, ``1/2 f(s,s1) f(s, s + (s2-s1))``
    for J_hat, and their difference has variance of the order of the gap.
    """
    rng = make_rng(seed, "bias")
    outer = stationary_states(env, n_outer, rng)
    j_acc = np.empty(n_outer)
    jh_acc = np.empty(n_outer)
    pos = 0
    per_chunk = max(1, CHUNK // n_inner)
    while pos < n_outer:
        k = min(per_chunk, n_outer - pos)
        s = np.repeat(outer[pos:pos + k], n_inner)
        xi1 = _noise(env, rng, s.size)
        xi2 = _noise(env, rng, s.size)
        s1 = _transition(env, s, xi1)
        s2 = _transition(env, s1, xi2)
        s_hat = bff_next_state(s, s1, s2, env)
        s_ind = _transition(env, s, xi2)
        v_s = approx.value(s)
        f1 = _residual(env, approx, s, s1, v_s)
        j = 0.5 * f1 * _residual(env, approx, s, s_ind, v_s)
        jh = 0.5 * f1 * _residual(env, approx, s, s_hat, v_s)
        j_acc[pos:pos + k] = j.reshape(k, n_inner).mean(axis=1)
        jh_acc[pos:pos + k] = jh.reshape(k, n_inner).mean(axis=1)
        pos += k
    j_val = float(j_acc.mean())
    jh_val = float(jh_acc.mean())
    diff = jh_acc - j_acc
    se = float(diff.std(ddof=1) / math.sqrt(n_outer)) if n_outer > 1 else 0.0
    return BiasEstimate(j_val, jh_val, jh_val - j_val, se, n_outer, n_inner)


def _mean(x: np.ndarray) -> MeanEstimate:
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return MeanEstimate(float(x.mean()), se, int(x.size))


def fit_power_law(eps: Sequence[float], gaps: Sequence[float]) -> tuple[float, float]:
    """Least-squares ``log|gap| = slope log(eps) + intercept``."""
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.abs(np.asarray(gaps, dtype=float)))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def epsilon_sweep(env: ContinuousEnvSpec, approx, eps_list: Sequence[float] = (0.2, 0.1, 0.05, 0.025),
                  n_outer: int = 100_000, n_inner: int = 10, seed: int = 0,
                  gap_estimator: Callable[..., BiasEstimate] | None = None) -> SweepResult:
    """Estimate the gap at each eps (other dynamics fixed) and fit its log-log slope.

    ``gap_estimator(env, approx, n_outer, n_inner, seed)`` defaults to
    :func:`estimate_gap`; pass a stand-in to exercise the fitter.
    """
    eps = [float(e) for e in eps_list]
    if len(set(eps)) < 3 or min(eps) <= 0:
        raise SpecError("need at least three distinct positive eps values")
    est = gap_estimator or estimate_gap
    gaps, ses = [], []
    for e in eps:
        b = est(replace(env, epsilon=e), approx, n_outer, n_inner, seed)
        if not abs(b.gap) > 3.0 * b.std_err:
            raise InsufficientSamplesError(
                f"gap {b.gap:.3e} at eps={e} is within 3 standard errors ({b.std_err:.3e}) of zero; "
                f"increase the sample count")
        gaps.append(b.gap)
        ses.append(b.std_err)
    slope, intercept = fit_power_law(eps, gaps)
    return SweepResult(np.array(eps), np.array(gaps), np.array(ses), slope, intercept)
