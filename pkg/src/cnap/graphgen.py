"""Synthetic MDPs and per-step value-iteration supervision for executor pretraining."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vioracle import TabularMDP, vi_step


@dataclass
class SupervisionPair:
    inputs: np.ndarray
    targets: np.ndarray
    mdp: TabularMDP
    step: int


def er_adjacency(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Directed Erdos-Renyi adjacency without self loops (boolean n x n)."""
    if n < 2:
        raise ValueError("need n >= 2")
    if not 0 < p <= 1:
        raise ValueError("edge probability must lie in (0, 1]")
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, False)
    return adj


def deterministic_mdp(successors: list[list[int]], rewards: np.ndarray, gamma: float) -> TabularMDP:
    n, A = rewards.shape
    P = np.zeros((n, A, n))
    for s, nbrs in enumerate(successors):
        for a in range(A):
            P[s, a, nbrs[a % len(nbrs)]] = 1.0
    return TabularMDP(P, rewards, gamma)


def gen_erdos_renyi(n: int, p: float, actions_per_state: int | None,
                    rng: np.random.Generator, gamma: float = 0.9) -> TabularMDP:
    """Deterministic MDP on a directed ER graph.

    Out-edges of each state become its actions in index order; states with
    fewer out-edges than actions repeat them cyclically, and states with no
    out-edge get a self loop.  ``actions_per_state=None`` uses the maximum
    out-degree so no edge is dropped.  Rewards are i.i.d. uniform [0, 1].
    """
    adj = er_adjacency(n, p, rng)
    successors = [list(np.flatnonzero(row)) or [s] for s, row in enumerate(adj)]
    A = actions_per_state or max(len(x) for x in successors)
    if A < 1:
        raise ValueError("actions_per_state must be >= 1")
    rewards = rng.random((n, A))
    return deterministic_mdp(successors, rewards, gamma)


def gen_bidirectional(n: int, rng: np.random.Generator, gamma: float = 0.9) -> TabularMDP:
    """Chain with a left and a right action per state; the goal is the right end.

    Per-state rewards are uniform [0, 1] draws sorted to increase toward the
    goal, whose reward is 1.  Both actions of a state share its reward, and
    the end states turn the outward action into a self loop.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    state_reward = np.sort(rng.random(n))
    state_reward[-1] = 1.0
    successors = [[max(s - 1, 0), min(s + 1, n - 1)] for s in range(n)]
    return deterministic_mdp(successors, np.repeat(state_reward[:, None], 2, axis=1), gamma)


def make_supervision(mdp: TabularMDP, num_steps: int, gamma: float | None = None) -> list[SupervisionPair]:
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if gamma is not None and gamma != mdp.gamma:
        mdp = TabularMDP(mdp.transitions, mdp.rewards, gamma)
    V = np.zeros(mdp.num_states)
    pairs = []
    for k in range(num_steps):
        nxt = vi_step(mdp, V)
        pairs.append(SupervisionPair(V, nxt, mdp, k))
        V = nxt
    return pairs


@dataclass
class PretrainDataConfig:
    regime: str = "erdos-renyi"  # or "bidirectional"
    num_train: int = 1000
    num_heldout: int = 50
    num_large: int = 50
    n_states: int = 20
    n_large: int = 50
    edge_prob: float = 0.2
    gamma: float = 0.9
    num_steps: int = 10
    seed: int = 0


def generate_graphs(cfg: PretrainDataConfig) -> dict[str, list[TabularMDP]]:
    """Train / held-out / size-generalization graph sets, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)

    def one(n):
        if cfg.regime == "erdos-renyi":
            return gen_erdos_renyi(n, cfg.edge_prob, None, rng, cfg.gamma)
        if cfg.regime == "bidirectional":
            return gen_bidirectional(n, rng, cfg.gamma)
        raise ValueError(f"unknown graph regime {cfg.regime!r}")

    return {
        "train": [one(cfg.n_states) for _ in range(cfg.num_train)],
        "heldout": [one(cfg.n_states) for _ in range(cfg.num_heldout)],
        "large": [one(cfg.n_large) for _ in range(cfg.num_large)],
    }


def save_dataset(graphs: dict[str, list[TabularMDP]], num_steps: int, root: str | Path) -> None:
    """One ``<split>_<i>.mdp`` text file per graph plus a ``<split>_<i>.values.json`` sidecar."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, mdps in graphs.items():
        for i, mdp in enumerate(mdps):
            mdp.save(root / f"{split}_{i}.mdp")
            pairs = make_supervision(mdp, num_steps)
            values = [pairs[0].inputs.tolist()] + [p.targets.tolist() for p in pairs]
            (root / f"{split}_{i}.values.json").write_text(json.dumps(values))


def load_dataset(root: str | Path) -> dict[str, list[TabularMDP]]:
    root = Path(root)
    out: dict[str, list[TabularMDP]] = {}
    for path in sorted(root.glob("*.mdp"), key=lambda p: (p.stem.rsplit("_", 1)[0],
                                                          int(p.stem.rsplit("_", 1)[1]))):
        split = path.stem.rsplit("_", 1)[0]
        out.setdefault(split, []).append(TabularMDP.load(path))
    return out
