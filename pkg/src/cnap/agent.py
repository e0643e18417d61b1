"""CNAP agent: encoder, latent transition, binned actions, sampled planning graph, heads.

Batched throughout: observations arrive as ``(B, obs_dim)``.  Randomness used
while expanding the planning graph is drawn up front (:meth:`Agent.draw_plan_noise`)
so a forward pass can be replayed exactly during the PPO update.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import (Categorical, MlpSpec, ParamStore, gumbel_softmax, init_linear, init_mlp,
                       linear, load_checkpoint, mlp_forward, sample_gaussian_reparam,
                       sample_gumbel, save_checkpoint)
from .envs import EnvSpec
from .executor import EDGE_DIM, Executor, LatentGraph, executor_infer

SAMPLERS = ("exhaustive", "manual-gaussian", "learned-gaussian", "reuse-policy", "learned-sampling")
VARIANTS = ("ppo-baseline", "cnap-b", "cnap-r")
AGENT_MODULE = "cnap-agent"


# Action discretization ------------------------------------------------------

@dataclass(frozen=True)
class ActionGrid:
    values: np.ndarray  # (D, N)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 2:
            raise ValueError("ActionGrid needs shape (D, N) with N >= 2")
        if np.any(np.diff(v, axis=1) <= 0):
            raise ValueError("bin values must be strictly increasing")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def low(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def high(self) -> np.ndarray:
        return self.values[:, -1]

    @property
    def size(self) -> int:
        return self.bins ** self.dims


def discretize(spec: EnvSpec, bins: int) -> ActionGrid:
    if bins < 2:
        raise ValueError("need at least 2 bins per dimension")
    j = np.arange(bins)
    rows = [lo + j * (hi - lo) / (bins - 1) for lo, hi in zip(spec.low, spec.high)]
    return ActionGrid(np.stack(rows))


def to_continuous(indices, grid: ActionGrid) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1] != grid.dims:
        raise ValueError(f"expected {grid.dims} indices per action, got {idx.shape[-1]}")
    if np.any(idx < 0) or np.any(idx >= grid.bins):
        raise IndexError(f"bin index out of range [0, {grid.bins - 1}]")
    return np.take_along_axis(grid.values, idx.reshape(-1, grid.dims).T, axis=1).T.reshape(idx.shape)


def nearest_bin(x, grid: ActionGrid) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.abs(x[..., None] - grid.values).argmin(-1)


def round_to_bins(x, bins: int):
    """Round half up and clamp into ``[0, bins - 1]`` (numpy or torch)."""
    if isinstance(x, torch.Tensor):
        return torch.clamp(torch.floor(x + 0.5), 0, bins - 1).long()
    return np.clip(np.floor(np.asarray(x) + 0.5), 0, bins - 1).astype(np.int64)


def exhaustive_actions(grid: ActionGrid) -> np.ndarray:
    return np.array(list(itertools.product(range(grid.bins), repeat=grid.dims)), dtype=np.int64)


# Factorized policy ----------------------------------------------------------

class FactorizedPolicy:
    """D independent categoricals over N bins; logits shaped ``(..., D, N)``."""

    def __init__(self, logits: torch.Tensor):
        self.logits = logits
        self.dist = Categorical(logits)

    def per_dim_log_prob(self, actions) -> torch.Tensor:
        return self.dist.log_prob(torch.as_tensor(actions, dtype=torch.long))

    def log_prob(self, actions) -> torch.Tensor:
        return self.per_dim_log_prob(actions).sum(-1)

    def entropy(self) -> torch.Tensor:
        return self.dist.entropy().sum(-1)

    def sample(self, rng: np.random.Generator) -> torch.Tensor:
        return self.dist.sample(rng)

    def mode(self) -> torch.Tensor:
        return self.logits.argmax(-1)


# Samplers -------------------------------------------------------------------
#
# Each returns ``(indices, encoding)`` with indices ``(M, K, D)`` and the action
# encoding ``(M, K, D, N)`` fed to the transition model.  Learned samplers
# give straight-through encodings: exact one-hots forward, relaxed gradients.

def one_hot(indices: torch.Tensor, bins: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(indices, bins).to(dtype)


def sample_manual_gaussian(grid: ActionGrid, K: int, rng: np.random.Generator | None = None,
                           noise=None) -> np.ndarray:
    """K action vectors with every index ~ round(Normal(N/2, N/4)) clamped to [0, N-1]."""
    if K < 1:
        raise ValueError("K must be >= 1")
    N = grid.bins
    z = rng.standard_normal((K, grid.dims)) if noise is None else np.asarray(noise)
    return round_to_bins(N / 2 + (N / 4) * z, N)


def learned_gaussian_params(h: torch.Tensor, params: ParamStore) -> tuple[torch.Tensor, torch.Tensor]:
    return linear(params, "lg.mu", h), linear(params, "lg.log_sigma", h)


@dataclass
class LearnedGaussianSample:
    indices: torch.Tensor
    pre_round: torch.Tensor
    encoding: torch.Tensor


def sample_learned_gaussian(h: torch.Tensor, params: ParamStore, grid: ActionGrid, K: int,
                            noise) -> LearnedGaussianSample:
    """Reparameterized Gaussian in bin-index units; ``noise`` is ``(M, K, D)`` (or ``(K, D)`` for a single h)."""
    single = h.dim() == 1
    h2 = h.unsqueeze(0) if single else h
    noise = torch.as_tensor(noise, dtype=h2.dtype)
    if single:
        noise = noise.unsqueeze(0)
    mu, log_sigma = learned_gaussian_params(h2, params)
    mu = mu.unsqueeze(1).expand(-1, K, -1)
    log_sigma = log_sigma.unsqueeze(1).expand(-1, K, -1)
    x = sample_gaussian_reparam(mu, log_sigma, noise)
    N = grid.bins
    idx = round_to_bins(x.detach(), N)
    soft = torch.softmax(-(torch.arange(N, dtype=x.dtype) - x.unsqueeze(-1)) ** 2, dim=-1)
    enc = one_hot(idx, N, x.dtype) + soft - soft.detach()
    if single:
        return LearnedGaussianSample(idx[0], x[0], enc[0])
    return LearnedGaussianSample(idx, x, enc)


def sample_reuse_policy(h: torch.Tensor, policy_params: ParamStore, grid: ActionGrid, K: int,
                        rng: np.random.Generator | None = None, gumbel_noise=None) -> torch.Tensor:
    """Draw K vectors from the policy head evaluated with a zero executor output."""
    single = h.dim() == 1
    h2 = h.unsqueeze(0) if single else h
    logits = policy_logits(h2, torch.zeros_like(h2), policy_params, grid).detach()
    shape = (h2.shape[0], K, grid.dims, grid.bins)
    g = sample_gumbel(rng, shape) if gumbel_noise is None else np.asarray(gumbel_noise).reshape(shape)
    idx = (logits.unsqueeze(1) + torch.as_tensor(g, dtype=logits.dtype)).argmax(-1)
    return idx[0] if single else idx


def learned_sampler_logits(h: torch.Tensor, params: ParamStore, grid: ActionGrid) -> torch.Tensor:
    return linear(params, "ls", h).reshape(*h.shape[:-1], grid.dims, grid.bins)


def sample_learned(h: torch.Tensor, params: ParamStore, grid: ActionGrid, K: int,
                   temperature: float, gumbel_noise, hard: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard Gumbel-Softmax draws from a factorized head; returns ``(indices, encoding)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    single = h.dim() == 1
    h2 = h.unsqueeze(0) if single else h
    logits = learned_sampler_logits(h2, params, grid)
    shape = (h2.shape[0], K, grid.dims, grid.bins)
    g = torch.as_tensor(np.asarray(gumbel_noise), dtype=logits.dtype).reshape(shape)
    y = gumbel_softmax(logits.unsqueeze(1).expand(shape), temperature, g, hard=hard)
    idx = y.detach().argmax(-1)
    return (idx[0], y[0]) if single else (idx, y)


# Heads ----------------------------------------------------------------------

def policy_logits(h: torch.Tensor, x: torch.Tensor, params: ParamStore, grid: ActionGrid) -> torch.Tensor:
    out = linear(params, "policy", torch.cat([h, x.to(h.dtype)], -1))
    return out.reshape(*out.shape[:-1], grid.dims, grid.bins)


def policy_head(h: torch.Tensor, x: torch.Tensor, params: ParamStore, grid: ActionGrid) -> FactorizedPolicy:
    return FactorizedPolicy(policy_logits(h, x, params, grid))


def value_head(h: torch.Tensor, x: torch.Tensor, params: ParamStore) -> torch.Tensor:
    return linear(params, "value", torch.cat([h, x.to(h.dtype)], -1)).squeeze(-1)


# Planning graph -------------------------------------------------------------

@dataclass
class PlanningGraph:
    graph: LatentGraph
    depth: torch.Tensor  # (num_nodes,)
    edge_actions: torch.Tensor  # (E, D) action labelling each child -> parent edge
    branching: int
    levels: int

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_edges(self) -> int:
        return len(self.graph.senders)


def tree_size(K: int, L: int) -> int:
    return sum(K ** l for l in range(L + 1))


class GraphBudgetError(ValueError):
    pass


@dataclass
class AgentConfig:
    obs_dim: int
    low: tuple[float, ...]
    high: tuple[float, ...]
    bins: int = 10
    hidden: int = 50
    variant: str = "cnap-r"
    sampler: str = "exhaustive"
    budget: int = 10  # K
    depth: int = 1  # planning depth L = executor message-passing steps
    temperature: float = 1.0
    max_nodes: int = 100_000
    zero_init_heads: bool = False
    seed: int = 0

    def __post_init__(self):
        self.low = tuple(float(x) for x in self.low)
        self.high = tuple(float(x) for x in self.high)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.bins < 2 or self.budget < 1 or self.depth < 1:
            raise ValueError("need bins >= 2, budget >= 1, depth >= 1")

    @property
    def action_dim(self) -> int:
        return len(self.low)

    @property
    def uses_planner(self) -> bool:
        return self.variant != "ppo-baseline"

    def effective_sampler(self) -> str:
        if self.bins ** self.action_dim <= self.budget:
            return "exhaustive"
        return self.sampler

    def branching(self) -> int:
        if self.effective_sampler() == "exhaustive":
            return self.bins ** self.action_dim
        return self.budget


class RunningMeanStd:
    """Per-dimension running moments (parallel-variance merge)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, len(self.mean))
        bm, bv, bc = x.mean(0), x.var(0), len(x)
        delta = bm - self.mean
        tot = self.count + bc
        self.mean = self.mean + delta * bc / tot
        self.var = (self.var * self.count + bv * bc + delta ** 2 * self.count * bc / tot) / tot
        self.count = tot

    def normalize(self, x, clip: float = 10.0) -> np.ndarray:
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -clip, clip)


@dataclass
class ActResult:
    indices: np.ndarray  # (B, D)
    action: np.ndarray  # (B, D) continuous
    log_prob: np.ndarray  # (B,)
    value: np.ndarray  # (B,)
    entropy: np.ndarray  # (B,)
    obs: np.ndarray  # normalized observations fed to the network
    plan_noise: list = field(default_factory=list)


class Agent:
    def __init__(self, config: AgentConfig, executor: Executor | None = None):
        self.config = config
        spec = EnvSpec(config.obs_dim, config.action_dim, config.low, config.high, 1)
        self.grid = discretize(spec, config.bins)
        k = config.hidden
        D, N = self.grid.dims, self.grid.bins
        if config.uses_planner:
            if executor is None:
                raise ValueError("CNAP variants need a pretrained executor")
            if executor.hidden != k:
                raise ValueError(f"executor hidden dim {executor.hidden} != agent hidden dim {k}")
            if not executor.frozen:
                raise ValueError("executor must be frozen")
        self.executor = executor if config.uses_planner else None
        self.encoder_spec = MlpSpec((config.obs_dim, k, k, k))
        self.transition_spec = MlpSpec((k + N * D, k, k, k), layer_norm="before_last")
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)
        init_mlp(self.encoder_spec, self.params, "encoder", rng)
        zero = config.zero_init_heads
        init_linear(self.params, "policy", 2 * k, N * D, rng, zero=zero)
        init_linear(self.params, "value", 2 * k, 1, rng, zero=zero)
        if config.uses_planner:
            init_mlp(self.transition_spec, self.params, "transition", rng)
            sampler = config.effective_sampler()
            if sampler == "learned-gaussian":
                init_linear(self.params, "lg.mu", k, D, rng, zero=zero)
                init_linear(self.params, "lg.log_sigma", k, D, rng, zero=zero)
                with torch.no_grad():
                    self.params["lg.mu.b"].fill_(N / 2)
                    self.params["lg.log_sigma.b"].fill_(math.log(N / 4))
            elif sampler == "learned-sampling":
                init_linear(self.params, "ls", k, N * D, rng, zero=zero)
        self.obs_rms = RunningMeanStd(config.obs_dim)
        self.graph_builds = 0

    # components -----------------------------------------------------------

    def encode(self, obs) -> torch.Tensor:
        return mlp_forward(self.encoder_spec, self.params, torch.as_tensor(obs), "encoder")

    def transition(self, h: torch.Tensor, encoding: torch.Tensor, record: dict | None = None) -> torch.Tensor:
        """``encoding`` is ``(..., D, N)`` (one-hot per dimension) or already flat ``(..., N*D)``."""
        if encoding.shape[-1] == self.grid.bins and encoding.dim() == h.dim() + 1:
            encoding = encoding.flatten(-2)
        x = torch.cat([h, encoding.to(h.dtype)], -1)
        return mlp_forward(self.transition_spec, self.params, x, "transition", record=record)

    def encode_actions(self, indices) -> torch.Tensor:
        return one_hot(torch.as_tensor(indices, dtype=torch.long), self.grid.bins)

    # planning -------------------------------------------------------------

    def draw_plan_noise(self, rng: np.random.Generator, batch: int) -> list[np.ndarray]:
        """Per planning level, the noise for every frontier node of every batch item.

        Level ``l`` (1-based) holds an array ``(batch, K**(l-1), K, D[, N])``.
        """
        cfg = self.config
        if not cfg.uses_planner:
            return []
        sampler = cfg.effective_sampler()
        K, D, N = cfg.branching(), self.grid.dims, self.grid.bins
        out = []
        for level in range(cfg.depth):
            frontier = K ** level
            if sampler == "exhaustive":
                out.append(np.zeros((batch, 0)))
            elif sampler in ("manual-gaussian", "learned-gaussian"):
                out.append(rng.standard_normal((batch, frontier, K, D)))
            else:
                out.append(sample_gumbel(rng, (batch, frontier, K, D, N)))
        return out

    def expand(self, h: torch.Tensor, noise: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """Sample K actions for every frontier embedding in ``h`` (M, k)."""
        cfg = self.config
        sampler = cfg.effective_sampler()
        M, K, N = h.shape[0], cfg.branching(), self.grid.bins
        if sampler == "exhaustive":
            idx = torch.as_tensor(exhaustive_actions(self.grid)).unsqueeze(0).expand(M, -1, -1)
            return idx, self.encode_actions(idx)
        noise = np.asarray(noise)
        noise = noise.reshape(M, K, *noise.shape[3:])
        if sampler == "manual-gaussian":
            idx = torch.as_tensor(sample_manual_gaussian(self.grid, K, noise=noise))
            return idx, self.encode_actions(idx)
        if sampler == "learned-gaussian":
            s = sample_learned_gaussian(h, self.params, self.grid, K, noise)
            return s.indices, s.encoding
        if sampler == "reuse-policy":
            idx = sample_reuse_policy(h, self.params, self.grid, K, gumbel_noise=noise)
            return idx, self.encode_actions(idx)
        return sample_learned(h, self.params, self.grid, K, cfg.temperature, noise)

    def build_planning_graph(self, h_root: torch.Tensor, plan_noise: list[np.ndarray]) -> PlanningGraph:
        """Breadth-first expansion to depth L with K sampled children per node.

        Nodes are stored level by level, children of a node contiguous, so the
        subtree of batch item ``b`` at level ``l`` is the block
        ``[b*K**l, (b+1)*K**l)``.  Edges point child -> parent.
        """
        cfg = self.config
        single = h_root.dim() == 1
        roots = h_root.unsqueeze(0) if single else h_root
        B, K, L = roots.shape[0], cfg.branching(), cfg.depth
        if tree_size(K, L) > cfg.max_nodes:
            raise GraphBudgetError(f"planning graph of {tree_size(K, L)} nodes exceeds max_nodes={cfg.max_nodes}")
        self.graph_builds += 1
        levels, depth, senders, receivers, labels = [roots], [torch.zeros(B, dtype=torch.long)], [], [], []
        offset = 0
        for level in range(1, L + 1):
            frontier = levels[-1]
            M = frontier.shape[0]
            noise = plan_noise[level - 1] if plan_noise else None
            idx, enc = self.expand(frontier, noise)
            parent_h = frontier.unsqueeze(1).expand(-1, K, -1)
            children = self.transition(parent_h.reshape(M * K, -1), enc.reshape(M * K, -1))
            child_ids = offset + M + torch.arange(M * K)
            parent_ids = offset + torch.arange(M).repeat_interleave(K)
            senders.append(child_ids)
            receivers.append(parent_ids)
            labels.append(idx.reshape(M * K, -1))
            depth.append(torch.full((M * K,), level, dtype=torch.long))
            offset += M
            levels.append(children)
        nodes = torch.cat(levels)
        senders_t = torch.cat(senders)
        edge_feats = nodes.new_zeros((len(senders_t), EDGE_DIM))
        graph = LatentGraph(nodes, senders_t, torch.cat(receivers), edge_feats, torch.arange(B))
        return PlanningGraph(graph, torch.cat(depth), torch.cat(labels), K, L)

    # full pass ------------------------------------------------------------

    def forward(self, obs_norm, plan_noise: list[np.ndarray] | None = None):
        """Returns ``(policy, value, executor_output)`` for a batch of normalized observations."""
        h = self.encode(torch.as_tensor(obs_norm, dtype=torch.float32))
        if self.config.uses_planner:
            pg = self.build_planning_graph(h, plan_noise or [])
            x = executor_infer(pg.graph, self.executor, self.config.depth)
        else:
            x = torch.zeros_like(h)
        return policy_head(h, x, self.params, self.grid), value_head(h, x, self.params), x

    def act(self, obs, rng: np.random.Generator, update_normalizer: bool = False,
            greedy: bool = False) -> ActResult:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.shape[-1] != self.config.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.config.obs_dim}")
        if update_normalizer:
            self.obs_rms.update(obs)
        obs_n = self.obs_rms.normalize(obs).astype(np.float32)
        noise = self.draw_plan_noise(rng, obs.shape[0])
        with torch.no_grad():
            policy, value, _ = self.forward(obs_n, noise)
            idx = policy.mode() if greedy else policy.sample(rng)
            logp = policy.log_prob(idx)
            ent = policy.entropy()
        idx_np = idx.numpy()
        return ActResult(idx_np, to_continuous(idx_np, self.grid), logp.numpy(), value.numpy(),
                         ent.numpy(), obs_n, noise)

    def value(self, obs, rng: np.random.Generator) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64).reshape(-1, self.config.obs_dim)
        obs_n = self.obs_rms.normalize(obs).astype(np.float32)
        with torch.no_grad():
            _, v, _ = self.forward(obs_n, self.draw_plan_noise(rng, obs.shape[0]))
        return v.numpy()

    # persistence ----------------------------------------------------------

    def save(self, path: str | Path, executor_path: str | None = None) -> None:
        arrays = dict(self.params.state_arrays())
        arrays["obs_rms.mean"] = self.obs_rms.mean
        arrays["obs_rms.var"] = self.obs_rms.var
        spec = {"config": asdict(self.config), "obs_rms_count": self.obs_rms.count}
        if self.executor is not None:
            spec["executor"] = {"path": executor_path,
                                "fingerprint": self.executor.params.fingerprint("proc.")}
            for n, a in self.executor.params.state_arrays().items():
                if n.startswith("proc."):
                    arrays[f"executor.{n}"] = a
        save_checkpoint(path, AGENT_MODULE, spec, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Agent":
        header, arrays = load_checkpoint(path)
        if header["module_name"] != AGENT_MODULE:
            raise ValueError(f"{path}: not an agent checkpoint")
        cfg = AgentConfig(**header["spec"]["config"])
        executor = None
        if cfg.uses_planner:
            executor = Executor(cfg.hidden)
            executor.params.load_arrays({n[len("executor."):]: a for n, a in arrays.items()
                                         if n.startswith("executor.")}, strict=True)
            executor.freeze()
        agent = cls(cfg, executor)
        agent.params.load_arrays({n: a for n, a in arrays.items()
                                  if not n.startswith(("executor.", "obs_rms."))})
        agent.obs_rms.mean = arrays["obs_rms.mean"].astype(np.float64)
        agent.obs_rms.var = arrays["obs_rms.var"].astype(np.float64)
        agent.obs_rms.count = header["spec"]["obs_rms_count"]
        return agent
