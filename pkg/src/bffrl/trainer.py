"""Deterministic minibatch SGD over a recorded trajectory, with error traces."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximator import CosineMLP, TabularValues, init_params
from .env import (
    STREAMS,
    TWO_PI,
    EnvironmentSpec,
    Trajectory,
    jump,
    make_rng,
    simulate,
)
from .errors import DivergenceError, EstimatorError, SpecError
from .residual import Estimator, WindowBatch, estimate_gradient, primal_dual_step
from .tabular import TabularSample, exact_value, sample_update, tabular_primal_dual_update

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
GRID_POINTS = 256


class BiasWarning(UserWarning):
    """The BFF bias bound is loose for this step-size/batch-size ratio."""


@dataclass(frozen=True)
class TrainConfig:
    estimator: Estimator = Estimator.BFF_LOSS
    tau: float = 0.1
    batch_size: int = 1000
    epochs: int = 1
    seed: int = 0
    eval_every: int = 100
    beta: float = 0.5
    dual_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise SpecError(f"tau must be a finite non-negative real, got {self.tau}")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise SpecError("batch_size, epochs and eval_every must be positive")

    @property
    def eta(self) -> float:
        """Learning rate over batch size."""
        return self.tau / self.batch_size


@dataclass
class ErrorTrace:
    steps: list[int] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)

    def record(self, step: int, err: float):
        self.steps.append(int(step))
        self.errors.append(float(err))

    @property
    def relative(self) -> list[float]:
        e0 = self.errors[0]
        return [e / e0 if e0 > 0 else 0.0 for e in self.errors]

    @property
    def final_relative(self) -> float:
        return self.relative[-1]

    def relative_at(self, step: int) -> float:
        """Relative error at the last recorded step not after ``step``."""
        k = max(i for i, s in enumerate(self.steps) if s <= step)
        return self.relative[k]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "error", "rel_error"])
            for s, e, r in zip(self.steps, self.errors, self.relative):
                w.writerow([s, repr(e), repr(r)])
        return path


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    kind: str
    grid: np.ndarray
    values: np.ndarray
    approx: object = None


def evaluation_grid(env: EnvironmentSpec) -> np.ndarray:
    if env.kind == "discrete":
        return np.arange(env.n)
    return TWO_PI * np.arange(1, GRID_POINTS + 1) / GRID_POINTS


def evaluate_error(approx, reference: ReferenceSolution) -> float:
    """Euclidean distance between ``approx`` and the reference on its grid."""
    diff = np.asarray(approx.value(reference.grid), dtype=float) - reference.values
    return float(math.sqrt(float(np.dot(diff, diff))))


def _perm_rng(seed: int, epoch: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS["permutation"], epoch))
    return np.random.Generator(np.random.PCG64(ss))


def usable_indices(T: int, needs_future: bool) -> int:
    return T - 1 if needs_future else T


def make_batches(trajectory: Trajectory | int, batch_size: int, needs_future: bool = True,
                 seed: int = 0, epoch: int = 0) -> list[np.ndarray]:
    """Seeded permutation of the usable window starts, cut into full batches.

    ``trajectory`` may also be given as its transition count T.
    """
    T = trajectory if isinstance(trajectory, (int, np.integer)) else trajectory.length
    usable = usable_indices(int(T), needs_future)
    n_batches = usable // batch_size
    if n_batches == 0:
        raise SpecError(f"trajectory too short: {usable} usable windows for batch size {batch_size}")
    perm = _perm_rng(seed, epoch).permutation(usable)
    return [perm[k * batch_size:(k + 1) * batch_size] for k in range(n_batches)]


def _default_dual(approx, config: TrainConfig):
    if isinstance(approx, TabularValues):
        return TabularValues(np.zeros(approx.n_params))
    seed = config.seed if config.dual_seed is None else config.dual_seed
    return init_params("mlp", seed, hidden=approx.hidden, n_states=approx.n_states, purpose="dual_init")


class _Recorder:
    def __init__(self, reference, every: int):
        self.reference = reference
        self.every = every
        self.trace = ErrorTrace()
        self.e0 = None

    def __call__(self, step: int, approx, force: bool = False):
        if self.reference is None or not (force or step % self.every == 0):
            return
        if self.trace.steps and self.trace.steps[-1] == step:
            return
        e = evaluate_error(approx, self.reference)
        self.trace.record(step, e)
        if self.e0 is None:
            self.e0 = e
        elif not math.isfinite(e) or (self.e0 > 0 and e > DIVERGENCE_FACTOR * self.e0):
            raise DivergenceError(f"diverged at step {step}: error {e:.3e} vs initial {self.e0:.3e}", self.trace)


def train(env: EnvironmentSpec, trajectory: Trajectory, approx, config: TrainConfig,
          reference: ReferenceSolution | None = None, *, dual=None, model_free: bool = False):
    """Run ``epochs`` passes of minibatch SGD; return ``(final approximator, ErrorTrace)``.

    With ``model_free=True`` the model-access oracle estimator is refused.
    """
    kind = config.estimator
    if model_free and kind.is_oracle:
        raise EstimatorError(f"{kind.value} uses model access and is disabled in model-free mode")
    if trajectory.env_kind != env.kind:
        raise SpecError("trajectory and environment kinds differ")
    if kind is Estimator.PRIMAL_DUAL and dual is None:
        dual = _default_dual(approx, config)

    rec = _Recorder(reference, config.eval_every)
    rec(0, approx, force=True)
    if isinstance(approx, TabularValues) and config.batch_size == 1:
        approx, step = _train_tabular_single(env, trajectory, approx, config, rec, dual)
    else:
        approx, step = _train_minibatch(env, trajectory, approx, config, rec, dual)
    rec(step, approx, force=True)
    log.debug("%s finished after %d steps", kind.value, step)
    return approx, rec.trace


def _train_minibatch(env, trajectory, approx, config, rec, dual):
    kind = config.estimator
    states = trajectory.states
    rng = make_rng(config.seed, "resample")
    step = 0
    for epoch in range(config.epochs):
        for idx in make_batches(trajectory, config.batch_size, True, config.seed, epoch):
            batch = WindowBatch.from_trajectory(states, env, idx, needs_future=kind.needs_future)
            if kind is Estimator.PRIMAL_DUAL:
                approx, dual = primal_dual_step(approx, dual, batch, env, config.tau, config.beta)
            else:
                est = estimate_gradient(kind, approx, batch, env, rng)
                approx = approx.with_params(approx.params - config.tau * est.grad)
            step += 1
            rec(step, approx)
    return approx, step


def _train_tabular_single(env, trajectory, approx, config, rec, dual):
    """Per-sample tabular updates ``v <- v - tau G_m`` on plain Python lists."""
    kind = config.estimator
    states = trajectory.states.tolist()
    r = env.reward_vector.tolist()
    gamma, tau, n = env.gamma, config.tau, env.n
    v = approx.values.tolist()
    y = None if dual is None else np.asarray(dual.values, dtype=float)
    rng = make_rng(config.seed, "resample")
    step = 0
    for epoch in range(config.epochs):
        # same permutation make_batches(..., batch_size=1) would emit
        perm = _perm_rng(config.seed, epoch).permutation(usable_indices(trajectory.length, True))
        alt = None
        if kind is Estimator.UNCORRELATED:
            alt = jump(env, trajectory.states[perm], rng.random(perm.size)).tolist()
        for t, m in enumerate(perm.tolist()):
            i, j = states[m], states[m + 1]
            if kind is Estimator.PRIMAL_DUAL:
                vv, y = tabular_primal_dual_update(v, y, TabularSample(i, j), r, gamma, tau, config.beta)
                v = vv.tolist()
            else:
                sample = TabularSample(i, j, k=states[m + 2], j_alt=None if alt is None else alt[t])
                for idx, g in sample_update(kind, sample, v, r, gamma, n).items():
                    v[idx] -= tau * g
            step += 1
            if step % rec.every == 0:
                rec(step, TabularValues(v))
    return TabularValues(v), step


def build_reference(env: EnvironmentSpec, kind: str | None = None, *, length: int = 1_000_000,
                    tau: float = 0.01, batch_size: int = 1000, epochs: int = 3, seed: int = 12345,
                    init_seed: int | None = None) -> ReferenceSolution:
    """Exact tabular values for finite chains; an oracle-trained network otherwise."""
    kind = kind or ("exact-tabular" if env.kind == "discrete" else "trained-oracle")
    if kind == "exact-tabular":
        if env.kind != "discrete":
            raise SpecError("exact reference needs a discrete environment")
        return ReferenceSolution(kind, evaluation_grid(env), exact_value(env))
    if kind != "trained-oracle":
        raise SpecError(f"unknown reference kind {kind!r}")
    traj = simulate(env, None, length, seed)
    n_states = env.n if env.kind == "discrete" else None
    approx = init_params("mlp", seed if init_seed is None else init_seed, n_states=n_states)
    cfg = TrainConfig(Estimator.UNCORRELATED, tau=tau, batch_size=batch_size, epochs=epochs, seed=seed)
    approx, _ = train(env, traj, approx, cfg, None)
    grid = evaluation_grid(env)
    return ReferenceSolution(kind, grid, np.asarray(approx.value(grid), dtype=float), approx)


def cached_reference(env: EnvironmentSpec, cache_dir, kind: str | None = None, **params) -> ReferenceSolution:
    """:func:`build_reference`, memoised as an ``.npz`` in ``cache_dir`` keyed by every input.

    The build is deterministic, so a cache hit returns bitwise the values a
    rebuild would. Exact tabular references are cheap and never cached.
    """
    kind = kind or ("exact-tabular" if env.kind == "discrete" else "trained-oracle")
    if kind == "exact-tabular":
        return build_reference(env, kind)
    blob = json.dumps([env.to_dict(), kind, params], sort_keys=True).encode()
    path = Path(cache_dir) / f"reference-{hashlib.sha256(blob).hexdigest()[:16]}.npz"
    if path.is_file():
        with np.load(path, allow_pickle=False) as d:
            n_states = env.n if env.kind == "discrete" else None
            return ReferenceSolution(kind, d["grid"].copy(), d["values"].copy(),
                                     CosineMLP(d["theta"].copy(), n_states=n_states))
    log.info("building %s reference into %s", kind, path)
    ref = build_reference(env, kind, **params)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    with os.fdopen(fd, "wb") as fh:
        np.savez(fh, grid=ref.grid, values=ref.values, theta=ref.approx.params)
    os.replace(tmp, path)
    return ref


@dataclass(frozen=True)
class EtaDiagnostic:
    ok: bool
    ratio: float
    message: str


def eta_diagnostic(config: TrainConfig, env: EnvironmentSpec, *, emit: bool = True) -> EtaDiagnostic:
    """Flag runs where ``eps^2 / eta`` exceeds 1 (eta = tau / M)."""
    if env.kind != "continuous":
        raise SpecError("the eps^2/eta diagnostic applies to the continuous environment")
    eps2 = env.epsilon ** 2
    if eps2 == 0.0:
        return EtaDiagnostic(True, 0.0, "eps = 0: no BFF bias")
    ratio = math.inf if config.eta == 0 else eps2 / config.eta
    if ratio <= 1.0:
        return EtaDiagnostic(True, ratio, f"eps^2/eta = {ratio:.3g}")
    msg = (f"eps^2/eta = {ratio:.3g} > 1: the BFF steady-state bias bound degrades when "
           f"eta = tau/M = {config.eta:.3g} is small relative to eps^2 (informational)")
    if emit:
        warnings.warn(msg, BiasWarning, stacklevel=2)
    return EtaDiagnostic(False, ratio, msg)


def value_profile_csv(path, approx, reference: ReferenceSolution) -> Path:
    path = Path(path)
    v = np.asarray(approx.value(reference.grid), dtype=float)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "v_approx", "v_reference"])
        for s, a, b in zip(reference.grid.tolist(), v.tolist(), reference.values.tolist()):
            w.writerow([repr(s) if isinstance(s, float) else s, repr(a), repr(b)])
    return path

