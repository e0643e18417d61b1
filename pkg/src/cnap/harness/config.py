"""Experiment configuration files (YAML) and their validation.

A run config looks like::

    name: table1-cnap-r
    env: mountaincar-continuous
    variant: cnap-r            # ppo-baseline | cnap-b | cnap-r
    sampler: exhaustive        # exhaustive | manual-gaussian | learned-gaussian | reuse-policy | learned-sampling
    bins: 10                   # N
    budget: 10                 # K
    gnn_steps: 1               # L
    seeds: [0, 1, 2]
    eval_episodes: 100
    train: {mode: episodes, num_updates: 20, episodes_per_rollout: 5}
    ppo: {lr: 0.0007}          # any PpoHyper field
    executor: {checkpoint: runs/executors/erdos-renyi.ckpt, pretrain_if_missing: true}
    output_dir: runs/table1

A grid config adds ``grid: {bins: [5, 10, 15], gnn_steps: [1, 2, 3]}``; any
top-level scalar field may be swept.  Relative paths resolve against the
output root (``$CNAP_OUTPUT_ROOT`` or the current directory).
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..agent import SAMPLERS, VARIANTS
from ..envs import ENV_NAMES
from ..executor import PretrainHyper
from ..graphgen import PretrainDataConfig
from ..ppo import PpoHyper, TrainConfig

OUTPUT_ROOT_ENV = "CNAP_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


@dataclass
class ExecutorSpec:
    checkpoint: str | None = None
    pretrain_if_missing: bool = True
    data: dict = field(default_factory=dict)  # PretrainDataConfig overrides
    hyper: dict = field(default_factory=dict)  # PretrainHyper overrides


@dataclass
class ExperimentConfig:
    env: str
    variant: str = "cnap-r"
    sampler: str = "exhaustive"
    bins: int = 10
    budget: int = 10
    gnn_steps: int = 1
    hidden: int = 50
    temperature: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_episodes: int = 100
    train: dict = field(default_factory=dict)
    ppo: dict = field(default_factory=dict)
    executor: ExecutorSpec = field(default_factory=ExecutorSpec)
    output_dir: str = "runs/default"
    name: str = "experiment"
    workers: int = 1

    def validate(self) -> None:
        if self.env not in ENV_NAMES and not self.env.startswith("njoint-"):
            raise ConfigError("env", f"unknown environment {self.env!r}; choose from {ENV_NAMES}")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {VARIANTS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError("sampler", f"must be one of {SAMPLERS}")
        if not isinstance(self.bins, int) or self.bins < 2:
            raise ConfigError("bins", "must be an integer >= 2")
        if not isinstance(self.budget, int) or self.budget < 1:
            raise ConfigError("budget", "must be an integer >= 1")
        if not isinstance(self.gnn_steps, int) or self.gnn_steps < 1:
            raise ConfigError("gnn_steps", "must be an integer >= 1")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of integers")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes", "must be >= 1")
        known = {f.name for f in fields(PpoHyper)}
        for k in self.ppo:
            if k not in known:
                raise ConfigError(f"ppo.{k}", "unknown PPO hyperparameter")
        known = {f.name for f in fields(TrainConfig)} - {"env", "seed"}
        for k in self.train:
            if k not in known:
                raise ConfigError(f"train.{k}", "unknown training field")
        try:
            self.ppo_hyper()
            self.train_config(0)
        except (TypeError, ValueError) as err:
            raise ConfigError("ppo/train", str(err)) from None

    def ppo_hyper(self) -> PpoHyper:
        return PpoHyper(**self.ppo)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(env=self.env, seed=seed, **self.train)

    def semantic_dict(self) -> dict:
        """Fields that change results; excludes seeds, naming, output location and parallelism."""
        d = asdict(self)
        for k in ("seeds", "output_dir", "name", "workers"):
            d.pop(k)
        d["ppo"] = asdict(self.ppo_hyper())
        d["train"] = {k: v for k, v in asdict(self.train_config(0)).items() if k not in ("env", "seed")}
        if self.variant == "ppo-baseline":
            for k in ("sampler", "budget", "gnn_steps", "temperature", "executor"):
                d.pop(k)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def executor_regime(self) -> str:
        return "bidirectional" if self.variant == "cnap-b" else "erdos-renyi"

    def pretrain_data(self) -> PretrainDataConfig:
        data = {"regime": self.executor_regime(), **self.executor.data}
        return PretrainDataConfig(**data)

    def pretrain_hyper(self) -> PretrainHyper:
        return PretrainHyper(**self.executor.hyper)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = copy.deepcopy(raw)
    raw.pop("grid", None)
    known = {f.name for f in fields(ExperimentConfig)}
    for k in raw:
        if k not in known:
            raise ConfigError(k, "unknown field")
    if "env" not in raw:
        raise ConfigError("env", "required")
    ex = raw.pop("executor", None) or {}
    if not isinstance(ex, dict):
        raise ConfigError("executor", "must be a mapping")
    try:
        cfg = ExperimentConfig(**raw, executor=ExecutorSpec(**ex))
    except TypeError as err:
        raise ConfigError("executor", str(err)) from None
    cfg.validate()
    return cfg


def load_raw(path: str | Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except yaml.YAMLError as err:
        raise ConfigError("<file>", f"cannot parse {path}: {err}") from None
    return raw


def load_config(path: str | Path) -> ExperimentConfig:
    return from_dict(load_raw(path))


def expand_grid(raw: dict) -> list[ExperimentConfig]:
    """Cross product of the ``grid`` entries; each point gets its own output subdirectory."""
    grid = raw.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must map field names to lists")
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid.{k}", "must be a non-empty list")
    base_out = raw.get("output_dir", "runs/default")
    base_name = raw.get("name", "experiment")
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = {k: v for k, v in raw.items() if k != "grid"}
        point.update(dict(zip(keys, combo)))
        tag = "_".join(f"{k}-{v}" for k, v in zip(keys, combo))
        point["output_dir"] = str(Path(base_out) / tag) if tag else base_out
        point["name"] = f"{base_name}[{tag}]" if tag else base_name
        out.append(from_dict(point))
    return out
