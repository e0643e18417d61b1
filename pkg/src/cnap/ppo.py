"""PPO with GAE for every agent parameter; the executor stays frozen."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .agent import Agent
from .diffcore import AdamHyper, NonFiniteError, adam_step
from .envs import make_env

log = logging.getLogger(__name__)


@dataclass
class PpoHyper:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch_size: int = 128
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 7e-4
    adam_eps: float = 1e-5
    max_grad_norm: float = 0.5
    transition_loss_coef: float = 0.0
    transition_margin: float = 1.0

    def __post_init__(self):
        if not (0 <= self.gamma < 1 and 0 <= self.lam < 1):
            raise ValueError("gamma and lambda must lie in [0, 1)")
        if self.clip < 0:
            raise ValueError("clip ratio must be non-negative")


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Advantages and returns for one contiguous trajectory fragment.

    ``values[t]`` estimates V(s_t); the state after the last step is valued
    at ``bootstrap_value``.  ``dones[t]`` cuts both the bootstrap and the
    recursion.  Advantages are *not* normalized here.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")
    T = len(rewards)
    adv = np.zeros(T)
    next_value = float(bootstrap_value)
    running = 0.0
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # normalized observations (T, obs_dim)
    actions: np.ndarray  # (T, D)
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    plan_noise: list[np.ndarray]  # per level, leading axis T
    next_obs: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        T = len(self)
        for name in ("obs", "actions", "log_probs", "values", "dones", "truncated"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"buffer field {name} has length {len(getattr(self, name))} != {T}")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("non-finite log-probs in buffer")
        if self.advantages is None or self.returns is None:
            raise ValueError("advantages/returns must be computed before the update")


@dataclass
class _Step:
    obs: np.ndarray
    next_obs: np.ndarray
    action: np.ndarray
    log_prob: float
    value: float
    reward: float
    done: bool
    truncated: bool
    noise: list


class RolloutCollector:
    """Runs ``num_envs`` copies of an environment against an agent.

    ``collect_episodes`` plays exactly one episode per environment;
    ``collect_steps`` plays a fixed number of steps per environment with
    automatic resets.
    """

    def __init__(self, env_name: str, num_envs: int, rng: np.random.Generator,
                 gamma: float = 0.99, lam: float = 0.95):
        self.gamma = gamma
        self.lam = lam
        self.envs = [make_env(env_name) for _ in range(num_envs)]
        self.rng = rng
        self.obs = [env.reset(rng) for env in self.envs]
        self.ep_return = np.zeros(num_envs)
        self.ep_len = np.zeros(num_envs, dtype=int)
        self.finished_returns: list[float] = []
        self.env_steps = 0

    def _act(self, agent: Agent, which: list[int]):
        return agent.act(np.stack([self.obs[i] for i in which]), self.rng, update_normalizer=True)

    def _record(self, agent, trajs, which, res, bootstrap):
        """Step the chosen envs; returns the set that finished this step."""
        finished = []
        for j, i in enumerate(which):
            env = self.envs[i]
            out = env.step(res.action[j])
            self.env_steps += 1
            self.ep_return[i] += out.reward
            self.ep_len[i] += 1
            next_obs_n = agent.obs_rms.normalize(out.obs).astype(np.float32)
            trajs[i].append(_Step(res.obs[j], next_obs_n, res.indices[j], float(res.log_prob[j]),
                                  float(res.value[j]), out.reward, out.done, out.truncated,
                                  [lvl[j] for lvl in res.plan_noise]))
            if out.done or out.truncated:
                if out.truncated and not out.done:
                    bootstrap.append((i, len(trajs[i]), out.obs))
                self.finished_returns.append(float(self.ep_return[i]))
                self.ep_return[i] = 0.0
                self.ep_len[i] = 0
                finished.append(i)
            self.obs[i] = out.obs
        return finished

    def collect_episodes(self, agent: Agent) -> RolloutBuffer:
        n = len(self.envs)
        self.obs = [env.reset(self.rng) for env in self.envs]
        self.ep_return[:] = 0
        trajs: list[list[_Step]] = [[] for _ in range(n)]
        bootstrap: list = []
        active = list(range(n))
        while active:
            res = self._act(agent, active)
            done = set(self._record(agent, trajs, active, res, bootstrap))
            active = [i for i in active if i not in done]
        return self._finish(agent, trajs, bootstrap, tail={})

    def collect_steps(self, agent: Agent, steps: int) -> RolloutBuffer:
        n = len(self.envs)
        trajs: list[list[_Step]] = [[] for _ in range(n)]
        bootstrap: list = []
        for _ in range(steps):
            res = self._act(agent, list(range(n)))
            for i in self._record(agent, trajs, list(range(n)), res, bootstrap):
                self.obs[i] = self.envs[i].reset(self.rng)
        tail = {i: self.obs[i] for i in range(n) if trajs[i] and not (trajs[i][-1].done or trajs[i][-1].truncated)}
        return self._finish(agent, trajs, bootstrap, tail)

    def _finish(self, agent, trajs, bootstrap, tail) -> RolloutBuffer:
        # Fragments end at termination (value 0), truncation or the rollout
        # tail (bootstrap from V of the following observation).
        boot_obs = [o for _, _, o in bootstrap] + list(tail.values())
        boot_vals = agent.value(np.stack(boot_obs), self.rng) if boot_obs else np.zeros(0)
        boot_at = {(i, end): float(v) for (i, end, _), v in zip(bootstrap, boot_vals)}
        for (i, _), v in zip(tail.items(), boot_vals[len(bootstrap):]):
            boot_at[(i, len(trajs[i]))] = float(v)
        steps: list[_Step] = []
        advs, rets = [], []
        for i, traj in enumerate(trajs):
            start = 0
            for t, st in enumerate(traj):
                if st.done or st.truncated or t == len(traj) - 1:
                    frag = traj[start:t + 1]
                    boot = 0.0 if st.done else boot_at.get((i, t + 1), 0.0)
                    a, r = compute_gae([s.reward for s in frag], [s.value for s in frag],
                                       [s.done for s in frag], boot, self.gamma, self.lam)
                    advs.append(a)
                    rets.append(r)
                    steps.extend(frag)
                    start = t + 1
        levels = len(steps[0].noise) if steps else 0
        return RolloutBuffer(
            obs=np.stack([s.obs for s in steps]),
            actions=np.stack([s.action for s in steps]),
            log_probs=np.array([s.log_prob for s in steps]),
            values=np.array([s.value for s in steps]),
            rewards=np.array([s.reward for s in steps]),
            dones=np.array([s.done for s in steps]),
            truncated=np.array([s.truncated for s in steps]),
            plan_noise=[np.stack([s.noise[l] for s in steps]) for l in range(levels)],
            next_obs=np.stack([s.next_obs for s in steps]),
            advantages=np.concatenate(advs),
            returns=np.concatenate(rets),
        )


def transition_consistency_loss(agent: Agent, obs, actions, next_obs, margin: float) -> torch.Tensor:
    """Hinge loss pulling transition(h, a) toward encode(s') and away from shuffled s'."""
    h = agent.encode(torch.as_tensor(obs))
    target = agent.encode(torch.as_tensor(next_obs))
    pred = agent.transition(h, agent.encode_actions(actions))
    pos = ((pred - target) ** 2).sum(-1)
    neg = ((pred - target.roll(1, 0)) ** 2).sum(-1)
    return (pos + torch.relu(margin - neg)).mean()


def ppo_losses(agent: Agent, buffer: RolloutBuffer, idx: np.ndarray, adv: np.ndarray,
               hyper: PpoHyper) -> dict[str, torch.Tensor]:
    noise = [lvl[idx] for lvl in buffer.plan_noise]
    policy, value, _ = agent.forward(buffer.obs[idx], noise)
    new_logp = policy.log_prob(torch.as_tensor(buffer.actions[idx]))
    old_logp = torch.as_tensor(buffer.log_probs[idx], dtype=new_logp.dtype)
    A = torch.as_tensor(adv[idx], dtype=new_logp.dtype)
    ratio = torch.exp(new_logp - old_logp)
    surr = ratio * A
    # the clipped ratio only carries gradient strictly inside the trust region,
    # and ties go to it, so a zero clip range has zero policy gradient
    inside = (ratio > 1 - hyper.clip) & (ratio < 1 + hyper.clip)
    clipped = torch.where(inside, ratio, ratio.detach().clamp(1 - hyper.clip, 1 + hyper.clip)) * A
    policy_loss = -torch.where(clipped <= surr, clipped, surr).mean()
    ret = torch.as_tensor(buffer.returns[idx], dtype=value.dtype)
    value_loss = ((ret - value) ** 2).mean()
    entropy = policy.entropy().mean()
    total = policy_loss + hyper.value_coef * value_loss - hyper.entropy_coef * entropy
    out = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": entropy,
           "clip_fraction": ((ratio - 1).abs() > hyper.clip).float().mean()}
    if hyper.transition_loss_coef > 0 and agent.config.uses_planner and buffer.next_obs is not None:
        aux = transition_consistency_loss(agent, buffer.obs[idx], buffer.actions[idx],
                                          buffer.next_obs[idx], hyper.transition_margin)
        out["transition_loss"] = aux
        total = total + hyper.transition_loss_coef * aux
    out["total"] = total
    return out


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


class UpdateAborted(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def ppo_update(agent: Agent, buffer: RolloutBuffer, hyper: PpoHyper,
               rng: np.random.Generator) -> dict[str, float]:
    buffer.validate()
    if agent.executor is not None and not agent.executor.frozen:
        raise RuntimeError("executor must be frozen during PPO")
    adv = normalize_advantages(buffer.advantages)
    opt = AdamHyper(lr=hyper.lr, eps=hyper.adam_eps)
    sums: dict[str, float] = {}
    count = 0
    T = len(buffer)
    for epoch in range(hyper.epochs):
        order = rng.permutation(T)
        for start in range(0, T, hyper.minibatch_size):
            idx = order[start:start + hyper.minibatch_size]
            losses = ppo_losses(agent, buffer, idx, adv, hyper)
            if not torch.isfinite(losses["total"]):
                raise UpdateAborted(
                    f"non-finite loss at epoch {epoch}",
                    {k: float(v.detach()) for k, v in losses.items()} | {"minibatch": idx.tolist()},
                )
            agent.params.zero_grad()
            losses["total"].backward()
            try:
                adam_step(agent.params, opt, max_grad_norm=hyper.max_grad_norm)
            except NonFiniteError as err:
                raise UpdateAborted(str(err), {"parameter": err.name}) from err
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            count += 1
    agent.params.zero_grad()
    return {k: v / max(count, 1) for k, v in sums.items()}


@dataclass
class TrainConfig:
    env: str
    mode: str = "episodes"  # "episodes" or "steps"
    num_updates: int = 20  # episodes mode: rollouts
    episodes_per_rollout: int = 5
    num_envs: int = 8  # steps mode
    horizon: int = 256  # steps mode: steps per env per rollout
    total_steps: int = 100_000  # steps mode budget
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("episodes", "steps"):
            raise ValueError(f"unknown rollout mode {self.mode!r}")


@dataclass
class TrainResult:
    agent: Agent
    metrics: list[dict] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)


METRIC_FIELDS = ("update", "env_steps", "episodes", "mean_reward", "policy_loss", "value_loss",
                 "entropy", "clip_fraction", "wall_time")


def train(agent: Agent, cfg: TrainConfig, hyper: PpoHyper, progress=None) -> TrainResult:
    """Collect -> GAE -> update, ``num_updates`` times (episodes mode) or until the step budget."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n_envs = cfg.episodes_per_rollout if cfg.mode == "episodes" else cfg.num_envs
    collector = RolloutCollector(cfg.env, n_envs, rng, hyper.gamma, hyper.lam)
    result = TrainResult(agent)
    start = time.time()
    num_updates = cfg.num_updates if cfg.mode == "episodes" else max(1, cfg.total_steps // (cfg.num_envs * cfg.horizon))
    for update in range(num_updates):
        if cfg.mode == "episodes":
            buffer = collector.collect_episodes(agent)
        else:
            buffer = collector.collect_steps(agent, cfg.horizon)
        report = ppo_update(agent, buffer, hyper, rng)
        recent = collector.finished_returns[-100:]
        row = {
            "update": update,
            "env_steps": collector.env_steps,
            "episodes": len(collector.finished_returns),
            "mean_reward": float(np.mean(recent)) if recent else float("nan"),
            "policy_loss": report["policy_loss"],
            "value_loss": report["value_loss"],
            "entropy": report["entropy"],
            "clip_fraction": report["clip_fraction"],
            "wall_time": time.time() - start,
        }
        result.metrics.append(row)
        log.info("update %d steps %d reward %.2f entropy %.3f", update, row["env_steps"],
                 row["mean_reward"], row["entropy"])
        if progress is not None:
            progress(row)
    result.episode_returns = list(collector.finished_returns)
    return result
