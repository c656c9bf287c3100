"""Environments: a periodic SDE-driven chain on (0, 2pi] and a finite Markov chain.

Both are simulated from explicit random streams. Model-access helpers
(``resample_next``, ``stationary_distribution``) exist for reference and
oracle code paths only; model-free estimators see nothing but trajectories.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_right
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .errors import ConvergenceError, SpecError

TWO_PI = 2.0 * math.pi
ROW_SUM_TOL = 1e-12

# Named child streams under one master seed. SeedSequence spawn keys make
# these statistically independent of one another.
STREAMS = {
    "trajectory": 0,
    "resample": 1,
    "permutation": 2,
    "init": 3,
    "dual_init": 4,
    "bias": 5,
}


def make_rng(seed: int, purpose: str = "trajectory") -> np.random.Generator:
    """Return the generator for ``purpose`` derived from a master ``seed``."""
    key = STREAMS[purpose]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


# --------------------------------------------------------------------------
# state-function registry
# --------------------------------------------------------------------------

_FUNCTIONS: dict[str, Callable] = {
    "zero": lambda s: np.zeros_like(np.asarray(s, dtype=float)),
    "two_sin_cos": lambda s: 2.0 * np.sin(s) * np.cos(s),
    "one_plus_cos_sq": lambda s: 1.0 + np.cos(s) ** 2,
    "cos_2s_plus_1": lambda s: np.cos(2.0 * np.asarray(s, dtype=float)) + 1.0,
}

_CONST = re.compile(r"^const:(.+)$")


def state_function(name: str) -> Callable:
    """Resolve a function id such as ``"two_sin_cos"`` or ``"const:1.5"``."""
    if name in _FUNCTIONS:
        return _FUNCTIONS[name]
    m = _CONST.match(name)
    if m:
        try:
            c = float(m.group(1))
        except ValueError:
            raise SpecError(f"bad constant in function id {name!r}") from None
        if not math.isfinite(c):
            raise SpecError(f"non-finite constant in function id {name!r}")
        return lambda s, c=c: np.full(np.shape(s), c, dtype=float)
    raise SpecError(f"unknown state function {name!r}; known: {sorted(_FUNCTIONS)} or const:<x>")


def wrap(s):
    """Map states onto the half-open interval (0, 2pi]."""
    w = np.mod(s, TWO_PI)
    w = np.where(w == 0.0, TWO_PI, w)
    return float(w) if np.ndim(w) == 0 else w


def circular_diff(b, a):
    """Minimal signed difference ``b - a`` on the circle, in (-pi, pi]."""
    d = np.mod(np.asarray(b, dtype=float) - np.asarray(a, dtype=float), TWO_PI)
    d = np.where(d > math.pi, d - TWO_PI, d)
    return float(d) if np.ndim(d) == 0 else d


# --------------------------------------------------------------------------
# specs
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ContinuousEnvSpec:
    """Euler-Maruyama chain ``s' = s + a(s) eps + sigma(s) sqrt(eps) Z`` with periodic wrap."""

    drift: str = "two_sin_cos"
    diffusion: str = "one_plus_cos_sq"
    epsilon: float = 0.1
    gamma: float = 0.9
    reward: str = "cos_2s_plus_1"

    kind = "continuous"

    def __post_init__(self):
        if not (self.epsilon >= 0.0 and math.isfinite(self.epsilon)):
            raise SpecError(f"epsilon must be a finite non-negative real, got {self.epsilon}")
        if not 0.0 <= self.gamma < 1.0:
            raise SpecError(f"gamma must lie in [0, 1), got {self.gamma}")
        grid = np.linspace(TWO_PI / 512, TWO_PI, 512)
        for name in (self.drift, self.diffusion, self.reward):
            if not np.all(np.isfinite(state_function(name)(grid))):
                raise SpecError(f"state function {name!r} is not finite on the domain")

    @cached_property
    def drift_fn(self) -> Callable:
        return state_function(self.drift)

    @cached_property
    def diffusion_fn(self) -> Callable:
        return state_function(self.diffusion)

    @cached_property
    def reward_fn(self) -> Callable:
        return state_function(self.reward)

    def rewards(self, s) -> np.ndarray:
        return np.asarray(self.reward_fn(np.asarray(s, dtype=float)), dtype=float)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "drift": self.drift,
            "diffusion": self.diffusion,
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "reward": self.reward,
        }


@dataclass(frozen=True, eq=False)
class DiscreteEnvSpec:
    """Finite chain with row-stochastic ``transition`` and per-state ``reward_vector``."""

    transition: np.ndarray
    reward_vector: np.ndarray
    gamma: float = 0.9
    label: str = field(default="custom")

    kind = "discrete"

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward_vector, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise SpecError(f"transition must be square, got shape {P.shape}")
        if r.shape != (P.shape[0],):
            raise SpecError(f"reward_vector must have length {P.shape[0]}, got {r.shape}")
        if np.any(P < 0.0) or np.any(P > 1.0) or not np.all(np.isfinite(P)):
            raise SpecError("transition entries must lie in [0, 1]")
        bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) >= ROW_SUM_TOL)
        if bad.size:
            raise SpecError(f"transition rows {bad.tolist()} do not sum to 1")
        if not np.all(np.isfinite(r)):
            raise SpecError("reward_vector must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise SpecError(f"gamma must lie in [0, 1), got {self.gamma}")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_vector", r)

    @property
    def n(self) -> int:
        return self.transition.shape[0]

    @cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.transition, axis=1)
        c[:, -1] = 1.0
        return c

    def rewards(self, i) -> np.ndarray:
        return self.reward_vector[np.asarray(i, dtype=np.int64)]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward_vector": self.reward_vector.tolist(),
        }


EnvironmentSpec = Union[ContinuousEnvSpec, DiscreteEnvSpec]


def ring_chain(n: int = 32, amplitude: float = 0.2, gamma: float = 0.9) -> DiscreteEnvSpec:
    """Nearest-neighbour ring with position-dependent drift and reward ``1 + cos(2 pi i / n)``.

    ``P[i, i+1] = 1/2 - amplitude sin(2 pi i / n)`` and
    ``P[i, i-1] = 1/2 + amplitude sin(2 pi i / n)``, indices mod n.
    """
    if n < 2:
        raise SpecError("ring needs at least two states")
    if not 0.0 <= amplitude <= 0.5:
        raise SpecError("amplitude must lie in [0, 1/2]")
    P = np.zeros((n, n))
    i = np.arange(n)
    phase = np.sin(TWO_PI * i / n)
    np.add.at(P, (i, (i + 1) % n), 0.5 - amplitude * phase)
    np.add.at(P, (i, (i - 1) % n), 0.5 + amplitude * phase)
    r = 1.0 + np.cos(TWO_PI * i / n)
    return DiscreteEnvSpec(P, r, gamma=gamma, label="ring")


def env_from_dict(d: dict) -> EnvironmentSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "continuous":
        return ContinuousEnvSpec(**d)
    if kind == "discrete":
        return DiscreteEnvSpec(
            np.asarray(d["transition"], dtype=float),
            np.asarray(d["reward_vector"], dtype=float),
            gamma=d.get("gamma", 0.9),
            label=d.get("label", "custom"),
        )
    raise SpecError(f"unknown environment kind {kind!r}")


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


def advance(spec: ContinuousEnvSpec, s, z):
    """Deterministic Euler-Maruyama step driven by the standard normal draw(s) ``z``."""
    s = np.asarray(s, dtype=float)
    raw = s + spec.drift_fn(s) * spec.epsilon + spec.diffusion_fn(s) * math.sqrt(spec.epsilon) * z
    if not np.all(np.isfinite(raw)):
        raise SpecError("non-finite state produced by drift/diffusion; malformed spec")
    return wrap(raw)


def step_continuous(spec: ContinuousEnvSpec, s, rng: np.random.Generator):
    z = rng.standard_normal(np.shape(s)) if np.ndim(s) else rng.standard_normal()
    return advance(spec, s, z)


def jump(spec: DiscreteEnvSpec, i, u):
    """Inverse-CDF transition from state(s) ``i`` given uniform draw(s) ``u`` in [0, 1)."""
    i = np.asarray(i, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    rows = spec.cdf[i]
    j = np.sum(rows <= u[..., None], axis=-1)
    return int(j) if j.ndim == 0 else j.astype(np.int64)


def step_discrete(spec: DiscreteEnvSpec, i, rng: np.random.Generator):
    u = rng.random(np.shape(i)) if np.ndim(i) else rng.random()
    return jump(spec, i, u)


def resample_next(spec: EnvironmentSpec, s, rng: np.random.Generator):
    """Draw a fresh next state from ``s`` (model access; oracle use only)."""
    if spec.kind == "continuous":
        return step_continuous(spec, s, rng)
    return step_discrete(spec, s, rng)


def stationary_distribution(spec: DiscreteEnvSpec, tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Invariant measure by damped power iteration ``x <- (x + x P) / 2``.

    Averaging successive iterates removes the oscillation of periodic chains
    and leaves the fixed point unchanged.
    """
    P = spec.transition
    x = np.full(spec.n, 1.0 / spec.n)
    for _ in range(max_iter):
        y = 0.5 * (x + x @ P)
        y /= y.sum()
        if np.max(np.abs(y - x)) < tol:
            return y
        x = y
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (reducible chain?)")


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    seed: int
    env_kind: str

    def __post_init__(self):
        st = np.array(self.states, dtype=np.int64 if self.env_kind == "discrete" else float)
        if st.ndim != 1 or st.size < 3:
            raise SpecError("a trajectory needs at least 3 states")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def length(self) -> int:
        """Number of transitions T (one fewer than the number of states)."""
        return self.states.size - 1

    def __len__(self) -> int:
        return self.states.size


def simulate(spec: EnvironmentSpec, s0=None, length: int = 1000, seed: int = 0) -> Trajectory:
    """Simulate ``length`` transitions from ``s0`` (default 1.0 or state 0)."""
    if length < 2:
        raise SpecError("length must be at least 2")
    rng = make_rng(seed, "trajectory")
    if spec.kind == "continuous":
        s = wrap(1.0 if s0 is None else float(s0))
        z = rng.standard_normal(length)
        out = np.empty(length + 1)
        out[0] = s
        drift, diff = spec.drift_fn, spec.diffusion_fn
        eps, sq = spec.epsilon, math.sqrt(spec.epsilon)
        for m in range(length):
            raw = s + float(drift(s)) * eps + float(diff(s)) * sq * z[m]
            if not math.isfinite(raw):
                raise SpecError("non-finite state produced by drift/diffusion; malformed spec")
            s = raw % TWO_PI
            if s == 0.0:
                s = TWO_PI
            out[m + 1] = s
        return Trajectory(out, seed, "continuous")

    i = 0 if s0 is None else int(s0)
    if not 0 <= i < spec.n:
        raise SpecError(f"initial state {i} outside [0, {spec.n})")
    u = rng.random(length)
    cdf = [row.tolist() for row in spec.cdf]
    out = np.empty(length + 1, dtype=np.int64)
    out[0] = i
    last = spec.n - 1
    for m in range(length):
        i = min(bisect_right(cdf[i], u[m]), last)
        out[m + 1] = i
    return Trajectory(out, seed, "discrete")


def save_trajectory(path, traj: Trajectory) -> Path:
    """Write ``traj`` as CSV: a ``#``-prefixed header then one state per row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# env_kind={traj.env_kind} seed={traj.seed} length={traj.length}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state"])
        if traj.env_kind == "discrete":
            w.writerows([int(x)] for x in traj.states)
        else:
            w.writerows([repr(float(x))] for x in traj.states)
    return path


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        meta = dict(kv.split("=", 1) for kv in header.lstrip("#").split())
        rows = list(csv.reader(fh))
    if rows[0] != ["state"]:
        raise SpecError(f"{path}: missing 'state' column header")
    kind = meta["env_kind"]
    conv = int if kind == "discrete" else float
    states = [conv(r[0]) for r in rows[1:]]
    if len(states) != int(meta["length"]) + 1:
        raise SpecError(f"{path}: header length {meta['length']} disagrees with {len(states) - 1} transitions")
    return Trajectory(np.asarray(states), int(meta["seed"]), kind)
