"""Seed sweeps: pretrain/resolve the executor, train, evaluate, write CSVs."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ..agent import Agent, AgentConfig
from ..envs import make_env
from ..executor import Executor, pretrain_executor
from ..graphgen import generate_graphs
from ..ppo import METRIC_FIELDS, train
from .config import ExperimentConfig, resolve

log = logging.getLogger(__name__)

ROW_FIELDS = ("fingerprint", "name", "variant", "sampler", "bins", "gnn_steps", "seed",
              "episodes", "mean_reward", "std_reward")


class RunFailure(RuntimeError):
    def __init__(self, message: str, seed: int | None = None):
        super().__init__(message)
        self.seed = seed


@dataclass
class ResultRow:
    fingerprint: str
    name: str
    variant: str
    sampler: str
    bins: int
    gnn_steps: int
    seed: int
    episodes: int
    mean_reward: float
    std_reward: float


def evaluate(agent: Agent, env_name: str, episodes: int, rng: np.random.Generator,
             policy=None) -> tuple[float, float, list[float]]:
    """Play ``episodes`` episodes in parallel, sampling from the frozen policy.

    ``policy`` overrides the agent with any ``obs_batch -> continuous actions``
    callable (used for scripted baselines).  Returns (mean, std, returns).
    """
    envs = [make_env(env_name) for _ in range(episodes)]
    obs = [env.reset(rng) for env in envs]
    totals = np.zeros(episodes)
    active = list(range(episodes))
    while active:
        batch = np.stack([obs[i] for i in active])
        if policy is None:
            actions = agent.act(batch, rng, update_normalizer=False).action
        else:
            actions = policy(batch)
        still = []
        for j, i in enumerate(active):
            res = envs[i].step(actions[j])
            totals[i] += res.reward
            obs[i] = res.obs
            if not (res.done or res.truncated):
                still.append(i)
        active = still
    return float(totals.mean()), float(totals.std()), totals.tolist()


def resolve_executor(cfg: ExperimentConfig) -> tuple[Executor | None, str | None]:
    if cfg.variant == "ppo-baseline":
        return None, None
    path = cfg.executor.checkpoint or f"runs/executors/{cfg.executor_regime()}-k{cfg.hidden}.ckpt"
    full = resolve(path)
    if not full.exists():
        if not cfg.executor.pretrain_if_missing:
            raise RunFailure(f"executor checkpoint {full} not found")
        log.info("pretraining %s executor -> %s", cfg.executor_regime(), full)
        result = pretrain_executor_from_config(cfg)
        result.executor.export_processor(full)
        write_pretrain_metrics(result, full.with_suffix(".json"))
    return Executor.load_processor(full, expected_hidden=cfg.hidden), str(full)


def pretrain_executor_from_config(cfg: ExperimentConfig):
    data = cfg.pretrain_data()
    graphs = generate_graphs(data)
    hyper = cfg.pretrain_hyper()
    hyper.num_steps = data.num_steps
    return pretrain_executor(graphs["train"], graphs["heldout"], graphs["large"], hyper, cfg.hidden)


def write_pretrain_metrics(result, path: Path) -> None:
    path.write_text(json.dumps({
        "train_mse": result.train_mse,
        "heldout_mse": result.heldout_mse,
        "large_mse": result.large_mse,
        "epoch_losses": result.epoch_losses,
    }, indent=2))


def make_agent(cfg: ExperimentConfig, seed: int, executor: Executor | None) -> Agent:
    spec = make_env(cfg.env).spec
    acfg = AgentConfig(obs_dim=spec.obs_dim, low=spec.low, high=spec.high, bins=cfg.bins,
                       hidden=cfg.hidden, variant=cfg.variant, sampler=cfg.sampler,
                       budget=cfg.budget, depth=cfg.gnn_steps, temperature=cfg.temperature,
                       seed=seed)
    return Agent(acfg, executor)


def run_seed(cfg: ExperimentConfig, seed: int, executor: Executor | None,
             executor_path: str | None = None, save_dir: Path | None = None):
    """Train and evaluate one seed; returns (ResultRow, metric rows, agent)."""
    torch.set_num_threads(1)
    agent = make_agent(cfg, seed, executor)
    before = executor.params.fingerprint() if executor is not None else None
    result = train(agent, cfg.train_config(seed), cfg.ppo_hyper())
    if executor is not None and executor.params.fingerprint() != before:
        raise RunFailure("executor parameters changed during training", seed)
    eval_rng = np.random.default_rng(10_000 + seed)
    mean, std, returns = evaluate(agent, cfg.env, cfg.eval_episodes, eval_rng)
    if save_dir is not None:
        agent.save(save_dir / f"agent_seed{seed}.ckpt", executor_path)
    row = ResultRow(cfg.fingerprint(), cfg.name, cfg.variant,
                    cfg.sampler if cfg.variant != "ppo-baseline" else "-", cfg.bins,
                    cfg.gnn_steps, seed, len(returns), mean, std)
    return row, result.metrics, agent


def _run_seed_job(args):
    cfg, seed, executor_path, save_dir = args
    executor = Executor.load_processor(executor_path, cfg.hidden) if executor_path else None
    row, metrics, _ = run_seed(cfg, seed, executor, executor_path, save_dir)
    return row, metrics


def aggregate(rows: list[ResultRow]) -> dict:
    means = np.array([r.mean_reward for r in rows])
    # pooled moments over all evaluation episodes of all seeds
    n = np.array([r.episodes for r in rows], dtype=float)
    second = np.array([r.std_reward ** 2 + r.mean_reward ** 2 for r in rows])
    pooled_mean = float((n * means).sum() / n.sum())
    pooled_std = float(np.sqrt(max((n * second).sum() / n.sum() - pooled_mean ** 2, 0.0)))
    return {
        "seeds": len(rows),
        "seed_mean": float(means.mean()),
        "seed_std": float(means.std()),
        "episode_mean": pooled_mean,
        "episode_std": pooled_std,
    }


def write_rows(rows: list[ResultRow], path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def read_rows(path: Path) -> list[ResultRow]:
    with path.open() as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(ResultRow(d["fingerprint"], d["name"], d["variant"], d["sampler"],
                                 int(d["bins"]), int(d["gnn_steps"]), int(d["seed"]),
                                 int(d["episodes"]), float(d["mean_reward"]), float(d["std_reward"])))
        return out


CURVE_FIELDS = ("label", "seed") + METRIC_FIELDS


def write_curves(curves: list[tuple[int, list[dict]]], label: str, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for seed, metrics in curves:
            for m in metrics:
                w.writerow({"label": label, "seed": seed, **m})


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Train/evaluate every seed and write rows.csv, curves.csv and summary.json."""
    out = resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    executor, executor_path = resolve_executor(cfg)
    rows: list[ResultRow] = []
    curves = []
    if cfg.workers > 1:
        jobs = [(cfg, s, executor_path, out) for s in cfg.seeds]
        with ProcessPoolExecutor(cfg.workers) as pool:
            for seed, (row, metrics) in zip(cfg.seeds, pool.map(_run_seed_job, jobs)):
                rows.append(row)
                curves.append((seed, metrics))
    else:
        for seed in cfg.seeds:
            try:
                row, metrics, _ = run_seed(cfg, seed, executor, executor_path, out)
            except RunFailure:
                raise
            except Exception as err:  # surfaced with the failing seed
                raise RunFailure(f"seed {seed}: {err}", seed) from err
            log.info("%s seed %d: %.2f +- %.2f", cfg.name, seed, row.mean_reward, row.std_reward)
            rows.append(row)
            curves.append((seed, metrics))
    write_rows(rows, out / "rows.csv")
    label = cfg.variant if cfg.variant == "ppo-baseline" else f"{cfg.variant}/{cfg.sampler}"
    write_curves(curves, label, out / "curves.csv")
    summary = {"name": cfg.name, "fingerprint": cfg.fingerprint(), "config": cfg.semantic_dict(),
               **aggregate(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
