"""Exact tabular value iteration in float64.

Text format for :class:`TabularMDP` (whitespace separated)::

    <num_states> <num_actions> <gamma>
    <num_states lines of num_actions rewards>
    <num_states * num_actions lines of num_states transition probs>   # row (s, a) at s*A + a
"""

from __future__ import annotations

from dataclasses import dataclass
from io import StringIO
from pathlib import Path

import numpy as np


@dataclass
class TabularMDP:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.validate()

    @property
    def num_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[1]

    def validate(self) -> None:
        P, R = self.transitions, self.rewards
        if R.ndim != 2 or P.shape != (R.shape[0], R.shape[1], R.shape[0]):
            raise ValueError(f"inconsistent shapes: transitions {P.shape}, rewards {R.shape}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if np.any(P < 0) or np.any(np.abs(P.sum(-1) - 1.0) > 1e-9):
            raise ValueError("each p(.|s,a) must be non-negative and sum to 1")

    def successors(self, s: int, a: int) -> np.ndarray:
        return np.flatnonzero(self.transitions[s, a])

    def to_text(self) -> str:
        S, A = self.rewards.shape
        out = StringIO()
        out.write(f"{S} {A} {self.gamma!r}\n")
        for row in self.rewards:
            out.write(" ".join(repr(float(x)) for x in row) + "\n")
        for row in self.transitions.reshape(S * A, S):
            out.write(" ".join(repr(float(x)) for x in row) + "\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TabularMDP":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        s, a, g = lines[0].split()
        S, A = int(s), int(a)
        rewards = np.array([[float(x) for x in ln.split()] for ln in lines[1:1 + S]])
        trans = np.array([[float(x) for x in ln.split()] for ln in lines[1 + S:1 + S + S * A]])
        return cls(trans.reshape(S, A, S), rewards.reshape(S, A), float(g))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "TabularMDP":
        return cls.from_text(Path(path).read_text())


def q_values(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.gamma * mdp.transitions @ V


def vi_step(mdp: TabularMDP, V) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (mdp.num_states,) or not np.all(np.isfinite(V)):
        raise ValueError("V must be a finite vector with one entry per state")
    return q_values(mdp, V).max(axis=1)


@dataclass
class VIResult:
    values: np.ndarray
    iterations: int
    converged: bool
    deltas: list[float]


def value_iteration(mdp: TabularMDP, tol: float = 1e-8, max_iters: int = 10_000,
                    V0=None) -> VIResult:
    """Iterate :func:`vi_step` from ``V0`` (zeros by default) until the sup-norm change < tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.num_states) if V0 is None else np.asarray(V0, dtype=np.float64)
    deltas = []
    for i in range(1, max_iters + 1):
        nxt = vi_step(mdp, V)
        deltas.append(float(np.max(np.abs(nxt - V))))
        V = nxt
        if deltas[-1] < tol:
            return VIResult(V, i, True, deltas)
    return VIResult(V, max_iters, False, deltas)


def extract_policy(mdp: TabularMDP, V) -> np.ndarray:
    """Greedy action per state; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(q_values(mdp, np.asarray(V, dtype=np.float64)), axis=1)


def evaluate_policy(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact value of a deterministic policy via a linear solve."""
    S = mdp.num_states
    idx = np.arange(S)
    P = mdp.transitions[idx, policy]
    r = mdp.rewards[idx, policy]
    return np.linalg.solve(np.eye(S) - mdp.gamma * P, r)
