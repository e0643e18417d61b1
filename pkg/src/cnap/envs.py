"""Seedable environments with a small gym-like contract.

``mountaincar-continuous`` follows the public MountainCarContinuous-v0
definition (float32 state, 999-step limit).  ``njoint-D`` is a linear chain
of D point masses, documented in ``docs/njoint.md``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    low: tuple[float, ...]
    high: tuple[float, ...]
    max_episode_steps: int

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1 or self.max_episode_steps < 1:
            raise ValueError(f"invalid EnvSpec {self}")
        if len(self.low) != self.action_dim or len(self.high) != self.action_dim:
            raise ValueError("action bounds must have one pair per dimension")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("need low < high in every action dimension")


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


# MountainCarContinuous ------------------------------------------------------

MIN_POSITION = -1.2
MAX_POSITION = 0.6
MAX_SPEED = 0.07
GOAL_POSITION = 0.45
POWER = 0.0015


def mcc_reset(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(-0.6, -0.4), 0.0], dtype=np.float32)


def mcc_step(state, action: float) -> tuple[StepResult, bool]:
    """Advance one step. Returns ``(result, clamped)``; truncation is the caller's job."""
    position, velocity = float(state[0]), float(state[1])
    force = min(max(float(action), -1.0), 1.0)
    clamped = force != float(action)

    velocity += force * POWER - 0.0025 * math.cos(3 * position)
    velocity = min(max(velocity, -MAX_SPEED), MAX_SPEED)
    position += velocity
    position = min(max(position, MIN_POSITION), MAX_POSITION)
    if position == MIN_POSITION and velocity < 0:
        velocity = 0.0

    done = bool(position >= GOAL_POSITION and velocity >= 0.0)
    reward = (100.0 if done else 0.0) - math.pow(force, 2) * 0.1
    obs = np.array([position, velocity], dtype=np.float32)
    return StepResult(obs, reward, done, False), clamped


class MountainCarContinuous:
    spec = EnvSpec(2, 1, (-1.0,), (1.0,), 999)

    def __init__(self):
        self.state = None
        self.t = 0
        self.clamp_warnings = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = mcc_reset(rng)
        self.t = 0
        return self.state.copy()

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (1,):
            raise ValueError(f"expected a 1-d action, got shape {a.shape}")
        res, clamped = mcc_step(self.state, a[0])
        self.clamp_warnings += int(clamped)
        self.state = res.obs
        self.t += 1
        res.truncated = not res.done and self.t >= self.spec.max_episode_steps
        res.obs = res.obs.copy()
        return res


# N-joint chain --------------------------------------------------------------

class NJointChain:
    """D unit point masses on a line, neighbours joined by springs.

    Each action component is a force on one mass; every mass feels linear
    ground damping.  Semi-implicit Euler with step ``dt``.  Observation is
    the positions relative to the head (mass 0) followed by the velocities,
    so it is translation invariant.  Reward per step is the head's forward
    displacement minus ``0.001 * |a|^2``.
    """

    def __init__(self, dof: int, stiffness: float = 1.0, damping: float = 0.5,
                 dt: float = 0.05, max_episode_steps: int = 1000, init_noise: float = 0.1):
        if dof < 1:
            raise ValueError("dof must be >= 1")
        self.dof = dof
        self.stiffness = stiffness
        self.damping = damping
        self.dt = dt
        self.init_noise = init_noise
        obs_dim = max(2 * dof - 1, 1)
        self.spec = EnvSpec(obs_dim, dof, (-1.0,) * dof, (1.0,) * dof, max_episode_steps)
        self.pos = np.zeros(dof)
        self.vel = np.zeros(dof)
        self.t = 0
        self.clamp_warnings = 0

    def observe(self) -> np.ndarray:
        rel = self.pos[1:] - self.pos[0]
        if self.dof == 1:
            return self.vel.astype(np.float32)
        return np.concatenate([rel, self.vel]).astype(np.float32)

    def set_state(self, pos, vel) -> None:
        self.pos = np.array(pos, dtype=np.float64)
        self.vel = np.array(vel, dtype=np.float64)
        self.t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.pos = rng.uniform(-self.init_noise, self.init_noise, self.dof)
        self.vel = rng.uniform(-self.init_noise, self.init_noise, self.dof)
        self.t = 0
        return self.observe()

    def spring_forces(self) -> np.ndarray:
        f = np.zeros(self.dof)
        stretch = np.diff(self.pos)
        f[:-1] += self.stiffness * stretch
        f[1:] -= self.stiffness * stretch
        return f

    def step(self, action) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.dof,):
            raise ValueError(f"expected action of length {self.dof}, got {a.shape}")
        clipped = np.clip(a, -1.0, 1.0)
        self.clamp_warnings += int(np.any(clipped != a))
        head_before = self.pos[0]
        acc = clipped + self.spring_forces() - self.damping * self.vel
        self.vel = self.vel + self.dt * acc
        self.pos = self.pos + self.dt * self.vel
        self.t += 1
        reward = (self.pos[0] - head_before) - 0.001 * float(clipped @ clipped)
        truncated = self.t >= self.spec.max_episode_steps
        return StepResult(self.observe(), float(reward), False, truncated)


def njoint_step(env: NJointChain, action) -> StepResult:
    return env.step(action)


ENV_NAMES = ("mountaincar-continuous", "njoint-2", "njoint-6", "njoint-17")


def make_env(name: str):
    if name == "mountaincar-continuous":
        return MountainCarContinuous()
    if name.startswith("njoint-"):
        try:
            dof = int(name.split("-", 1)[1])
        except ValueError:
            raise ValueError(f"unknown environment {name!r}") from None
        return NJointChain(dof)
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
