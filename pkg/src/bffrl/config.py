"""Experiment configuration: YAML text <-> validated dataclasses.

Unknown keys are rejected with their dotted location so that a typo such
as ``trainer.tua`` fails loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Union

import yaml

from .env import ContinuousEnvSpec, DiscreteEnvSpec, EnvironmentSpec, ring_chain
from .errors import SpecError
from .residual import Estimator

SCHEMA_VERSION = 1


class ConfigError(SpecError):
    pass


@dataclass
class ContinuousEnvBlock:
    kind: str = "continuous"
    drift: str = "two_sin_cos"
    diffusion: str = "one_plus_cos_sq"
    epsilon: float = 0.1
    gamma: float = 0.9
    reward: str = "cos_2s_plus_1"

    def build(self) -> ContinuousEnvSpec:
        return ContinuousEnvSpec(self.drift, self.diffusion, float(self.epsilon), float(self.gamma), self.reward)


@dataclass
class DiscreteEnvBlock:
    kind: str = "discrete"
    preset: str = "ring"
    n: int = 32
    amplitude: float = 0.2
    gamma: float = 0.9
    transition: list | None = None
    reward_vector: list | None = None

    def build(self) -> DiscreteEnvSpec:
        if self.preset == "ring":
            base = ring_chain(int(self.n), float(self.amplitude), float(self.gamma))
            P, r = base.transition, base.reward_vector
        elif self.preset == "custom":
            if self.transition is None or self.reward_vector is None:
                raise ConfigError("environment: custom preset needs transition and reward_vector")
            P, r = self.transition, self.reward_vector
        else:
            raise ConfigError(f"environment.preset: unknown preset {self.preset!r}")
        if self.transition is not None:
            P = self.transition
        if self.reward_vector is not None:
            r = self.reward_vector
        return DiscreteEnvSpec(P, r, gamma=float(self.gamma), label=self.preset)


@dataclass
class TrajectoryBlock:
    length: int = 100_000
    s0: float | int | None = None


@dataclass
class ApproximatorBlock:
    kind: str = "tabular"
    init_seed: int | None = None


@dataclass
class TrainerBlock:
    estimator: Union[str, list] = "bff_loss"
    tau: float = 0.1
    batch_size: int = 1
    epochs: int = 1
    eval_every: int = 100
    beta: float = 0.5
    dual_seeds: list | None = None

    def estimators(self) -> list[Estimator]:
        names = self.estimator if isinstance(self.estimator, list) else [self.estimator]
        try:
            return [Estimator(n) for n in names]
        except ValueError as exc:
            raise ConfigError(f"trainer.estimator: {exc}") from None


@dataclass
class ReferenceBlock:
    kind: str | None = None
    length: int = 1_000_000
    tau: float = 0.01
    batch_size: int = 1000
    epochs: int = 3
    seed: int = 12345


@dataclass
class SweepBlock:
    eps: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    n_outer: int = 100_000
    n_inner: int = 10
    seed: int = 0
    init_seed: int = 0
    control_drift: str | None = None
    control_diffusion: str | None = None


@dataclass
class OutputBlock:
    directory: str | None = None
    formats: list = field(default_factory=lambda: ["csv"])


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    master_seed: int = 0
    environment: Union[ContinuousEnvBlock, DiscreteEnvBlock] = field(default_factory=DiscreteEnvBlock)
    trajectory: TrajectoryBlock = field(default_factory=TrajectoryBlock)
    approximator: ApproximatorBlock = field(default_factory=ApproximatorBlock)
    trainer: TrainerBlock = field(default_factory=TrainerBlock)
    reference: ReferenceBlock = field(default_factory=ReferenceBlock)
    bias_sweep: SweepBlock | None = None
    output: OutputBlock = field(default_factory=OutputBlock)

    def env_spec(self) -> EnvironmentSpec:
        return self.environment.build()

    @property
    def init_seed(self) -> int:
        s = self.approximator.init_seed
        return self.master_seed if s is None else s

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_BLOCKS = {
    "trajectory": TrajectoryBlock,
    "approximator": ApproximatorBlock,
    "trainer": TrainerBlock,
    "reference": ReferenceBlock,
    "bias_sweep": SweepBlock,
    "output": OutputBlock,
}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key (allowed: {sorted(names)})")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping")
    data = dict(data)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version} (expected {SCHEMA_VERSION})")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level key (allowed: {sorted(top)})")
    env = data.get("environment", {"kind": "discrete"})
    kind = env.get("kind") if isinstance(env, dict) else None
    if kind == "continuous":
        data["environment"] = _build(ContinuousEnvBlock, env, "environment")
    elif kind == "discrete":
        data["environment"] = _build(DiscreteEnvBlock, env, "environment")
    else:
        raise ConfigError(f"environment.kind: expected 'continuous' or 'discrete', got {kind!r}")
    for key, cls in _BLOCKS.items():
        if data.get(key) is not None:
            data[key] = _build(cls, data[key], key)
    cfg = ExperimentConfig(**data)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if cfg.approximator.kind not in ("tabular", "mlp"):
        raise ConfigError(f"approximator.kind: expected 'tabular' or 'mlp', got {cfg.approximator.kind!r}")
    if cfg.approximator.kind == "tabular" and cfg.environment.kind != "discrete":
        raise ConfigError("approximator.kind: tabular values need a discrete environment")
    cfg.trainer.estimators()
    if cfg.trajectory.length < 2:
        raise ConfigError("trajectory.length: must be at least 2")
    try:
        cfg.env_spec()
    except SpecError as exc:
        raise ConfigError(f"environment: {exc}") from None


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(data)


def bundled_names() -> list[str]:
    root = resources.files("bffrl") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load(path_or_name: str | Path) -> tuple[ExperimentConfig, bytes]:
    """Load a config file, or a bundled config by name; returns the parsed config and raw bytes."""
    p = Path(path_or_name)
    if p.is_file():
        raw = p.read_bytes()
    else:
        res = resources.files("bffrl") / "configs" / f"{path_or_name}.yaml"
        if not res.is_file():
            raise ConfigError(f"no config file or bundled config named {str(path_or_name)!r} "
                              f"(bundled: {', '.join(bundled_names())})")
        raw = res.read_bytes()
    return loads(raw.decode()), raw
