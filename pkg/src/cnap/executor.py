"""Max-aggregation message-passing executor trained to imitate one value-iteration step.

Edges point from successor to predecessor, so messages carry successor
values back toward the state being updated.  After pretraining only the
processor (message and update MLPs) is used, frozen, inside the agent.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .diffcore import (AdamHyper, MlpSpec, ParamStore, adam_step, init_mlp, load_checkpoint,
                       mlp_forward, save_checkpoint)
from .vioracle import TabularMDP

log = logging.getLogger(__name__)

PROCESSOR_MODULE = "executor-processor"
EDGE_DIM = 3  # (reward, transition probability, discount)


@dataclass
class LatentGraph:
    nodes: torch.Tensor  # (num_nodes, k)
    senders: torch.Tensor  # (E,) long
    receivers: torch.Tensor  # (E,) long
    edge_features: torch.Tensor  # (E, edge_dim)
    roots: torch.Tensor  # (num_roots,) long; a single-rooted graph has one entry

    def __post_init__(self):
        self.senders = torch.as_tensor(self.senders, dtype=torch.long)
        self.receivers = torch.as_tensor(self.receivers, dtype=torch.long)
        self.roots = torch.as_tensor(self.roots, dtype=torch.long).reshape(-1)
        n = self.nodes.shape[0]
        if self.senders.shape != self.receivers.shape or self.edge_features.shape[0] != len(self.senders):
            raise ValueError("edge arrays disagree in length")
        for name, idx in (("sender", self.senders), ("receiver", self.receivers), ("root", self.roots)):
            if len(idx) and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} index out of range for {n} nodes")
        if len(self.roots) == 0:
            raise ValueError("graph needs a root")

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    def with_nodes(self, nodes: torch.Tensor) -> "LatentGraph":
        return LatentGraph(nodes, self.senders, self.receivers, self.edge_features, self.roots)


class Executor:
    """Encoder / processor / decoder parameters in one :class:`ParamStore`."""

    def __init__(self, hidden: int = 50, edge_dim: int = EDGE_DIM, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        self.hidden = hidden
        self.edge_dim = edge_dim
        self.message_spec = MlpSpec((2 * hidden + edge_dim, hidden, hidden))
        self.update_spec = MlpSpec((2 * hidden, hidden, hidden))
        self.encoder_spec = MlpSpec((1, hidden), ("identity",))
        self.decoder_spec = MlpSpec((hidden, 1), ("identity",))
        self.params = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        init_mlp(self.encoder_spec, self.params, "enc", rng)
        init_mlp(self.message_spec, self.params, "proc.msg", rng)
        init_mlp(self.update_spec, self.params, "proc.upd", rng)
        init_mlp(self.decoder_spec, self.params, "dec", rng)
        self.frozen = False

    def freeze(self) -> None:
        self.params.set_trainable("", False)
        self.frozen = True

    def astype(self, dtype: torch.dtype) -> "Executor":
        """Copy with parameters cast to ``dtype`` (same frozen state)."""
        out = Executor.__new__(Executor)
        out.__dict__.update(self.__dict__)
        out.params = self.params.copy(dtype)
        return out

    def message(self, receiver_h, sender_h, edge_features):
        x = torch.cat([receiver_h, sender_h, edge_features.to(receiver_h.dtype)], dim=-1)
        return mlp_forward(self.message_spec, self.params, x, "proc.msg")

    def update(self, h, aggregated):
        return mlp_forward(self.update_spec, self.params, torch.cat([h, aggregated], -1), "proc.upd")

    def encode_values(self, values):
        return mlp_forward(self.encoder_spec, self.params, values.unsqueeze(-1), "enc")

    def decode_values(self, h):
        return mlp_forward(self.decoder_spec, self.params, h, "dec").squeeze(-1)

    def processor_spec(self) -> dict:
        return {
            "hidden": self.hidden,
            "edge_dim": self.edge_dim,
            "message": self.message_spec.to_dict(),
            "update": self.update_spec.to_dict(),
        }

    def export_processor(self, path: str | Path) -> None:
        arrays = {n: a for n, a in self.params.state_arrays().items() if n.startswith("proc.")}
        save_checkpoint(path, PROCESSOR_MODULE, self.processor_spec(), arrays)

    @classmethod
    def load_processor(cls, path: str | Path, expected_hidden: int | None = None) -> "Executor":
        header, arrays = load_checkpoint(path)
        if header["module_name"] != PROCESSOR_MODULE:
            raise ValueError(f"{path}: expected a {PROCESSOR_MODULE} checkpoint, "
                             f"got {header['module_name']!r}")
        spec = header["spec"]
        if expected_hidden is not None and spec["hidden"] != expected_hidden:
            raise ValueError(f"{path}: processor hidden dim {spec['hidden']} "
                             f"!= configured {expected_hidden}")
        ex = cls(spec["hidden"], spec["edge_dim"])
        ex.params.load_arrays(arrays, strict=True)
        ex.freeze()
        return ex


MessageFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def aggregate_max(messages: torch.Tensor, receivers: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Elementwise max per receiver; nodes without incoming edges get zeros."""
    out = messages.new_zeros((num_nodes, messages.shape[-1]))
    if messages.shape[0] == 0:
        return out
    index = receivers.unsqueeze(-1).expand_as(messages)
    return out.scatter_reduce(0, index, messages, reduce="amax", include_self=False)


def mpnn_step(graph: LatentGraph, executor: Executor, message_fn: MessageFn | None = None) -> torch.Tensor:
    h = graph.nodes
    message_fn = message_fn or executor.message
    msgs = message_fn(h[graph.receivers], h[graph.senders], graph.edge_features)
    agg = aggregate_max(msgs, graph.receivers, graph.num_nodes)
    return executor.update(h, agg)


def executor_infer(graph: LatentGraph, executor: Executor, steps: int) -> torch.Tensor:
    """Run the frozen processor ``steps`` times; returns root embeddings, shape (num_roots, k)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not executor.frozen:
        raise RuntimeError("executor must be frozen before inference")
    g = graph
    for _ in range(steps):
        g = g.with_nodes(mpnn_step(g, executor))
    return g.nodes[graph.roots]


# Supervision graphs ---------------------------------------------------------

@dataclass
class MdpEdges:
    senders: np.ndarray
    receivers: np.ndarray
    features: np.ndarray


def mdp_edges(mdp: TabularMDP) -> MdpEdges:
    """One edge per (s, a, s') with p > 0, pointing s' -> s with features (r(s,a), p, gamma)."""
    s, a, nxt = np.nonzero(mdp.transitions)
    feats = np.stack([mdp.rewards[s, a], mdp.transitions[s, a, nxt],
                      np.full(len(s), mdp.gamma)], axis=1)
    return MdpEdges(nxt, s, feats)


def batch_supervision(items: list[tuple[MdpEdges, np.ndarray, np.ndarray]], dtype=torch.float32):
    """Disjoint union of several (edges, inputs, targets) into one graph."""
    senders, receivers, feats, xs, ys = [], [], [], [], []
    offset = 0
    for edges, x, y in items:
        senders.append(edges.senders + offset)
        receivers.append(edges.receivers + offset)
        feats.append(edges.features)
        xs.append(x)
        ys.append(y)
        offset += len(x)
    return (
        torch.as_tensor(np.concatenate(senders)),
        torch.as_tensor(np.concatenate(receivers)),
        torch.as_tensor(np.concatenate(feats), dtype=dtype),
        torch.as_tensor(np.concatenate(xs), dtype=dtype),
        torch.as_tensor(np.concatenate(ys), dtype=dtype),
    )


def predict_step(executor: Executor, senders, receivers, feats, values) -> torch.Tensor:
    h = executor.encode_values(values)
    graph = LatentGraph(h, senders, receivers, feats, torch.zeros(1, dtype=torch.long))
    return executor.decode_values(mpnn_step(graph, executor))


@dataclass
class PretrainHyper:
    epochs: int = 30
    batch_graphs: int = 32
    lr: float = 1e-3
    num_steps: int = 10
    seed: int = 0
    normalize: bool = True


@dataclass
class PretrainResult:
    executor: Executor
    train_mse: float
    heldout_mse: float
    large_mse: float
    epoch_losses: list[float] = field(default_factory=list)


class PretrainDivergence(RuntimeError):
    pass


def supervision_items(mdps: list[TabularMDP], num_steps: int, normalize: bool):
    items = []
    for mdp in mdps:
        edges = mdp_edges(mdp)
        scale = (1.0 - mdp.gamma) if normalize else 1.0
        V = np.zeros(mdp.num_states)
        for _ in range(num_steps):
            nxt = (mdp.rewards + mdp.gamma * mdp.transitions @ V).max(1)
            items.append((edges, V * scale, nxt * scale))
            V = nxt
    return items


def evaluate_mse(executor: Executor, items, batch: int = 64) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(items), batch):
            s, r, f, x, y = batch_supervision(items[i:i + batch], executor.params.dtype)
            pred = predict_step(executor, s, r, f, x)
            total += float(((pred - y) ** 2).sum())
            count += len(y)
    return total / max(count, 1)


def pretrain_executor(train: list[TabularMDP], heldout: list[TabularMDP], large: list[TabularMDP],
                      hyper: PretrainHyper, hidden: int = 50) -> PretrainResult:
    """Fit encoder/processor/decoder to single VI steps; returns the frozen executor."""
    if not train:
        raise ValueError("empty training set")
    executor = Executor(hidden, seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    items = supervision_items(train, hyper.num_steps, hyper.normalize)
    opt = AdamHyper(lr=hyper.lr)
    epoch_losses = []
    pairs_per_batch = hyper.batch_graphs
    for epoch in range(hyper.epochs):
        t0 = time.time()
        order = rng.permutation(len(items))
        total, count = 0.0, 0
        for i in range(0, len(order), pairs_per_batch):
            chunk = [items[j] for j in order[i:i + pairs_per_batch]]
            s, r, f, x, y = batch_supervision(chunk)
            pred = predict_step(executor, s, r, f, x)
            loss = ((pred - y) ** 2).mean()
            if not torch.isfinite(loss):
                raise PretrainDivergence(f"non-finite loss at epoch {epoch}, batch {i // pairs_per_batch}")
            executor.params.zero_grad()
            loss.backward()
            adam_step(executor.params, opt)
            total += float(loss.detach()) * len(y)
            count += len(y)
        epoch_losses.append(total / count)
        log.info("executor epoch %d loss %.6f (%.1fs)", epoch, epoch_losses[-1], time.time() - t0)
    executor.freeze()
    train_mse = evaluate_mse(executor, items)
    heldout_mse = evaluate_mse(executor, supervision_items(heldout, hyper.num_steps, hyper.normalize)) if heldout else float("nan")
    large_mse = evaluate_mse(executor, supervision_items(large, hyper.num_steps, hyper.normalize)) if large else float("nan")
    return PretrainResult(executor, train_mse, heldout_mse, large_mse, epoch_losses)


def constructive_executor(hidden: int, gamma: float) -> Executor:
    """Hand-set float64 weights that perform one exact VI step on channel 0.

    message = relu(r + gamma * h_sender[0]) in channel 0, update copies the
    aggregated channel 0, encoder/decoder are the identity on channel 0.
    Exact whenever rewards and values are non-negative.
    """
    ex = Executor(hidden, seed=0, dtype=torch.float64)
    with torch.no_grad():
        for t in ex.params.params.values():
            t.zero_()
        k = hidden
        ex.params["enc.l0.w"][0, 0] = 1.0
        ex.params["dec.l0.w"][0, 0] = 1.0
        ex.params["proc.msg.l0.w"][0, k] = gamma
        ex.params["proc.msg.l0.w"][0, 2 * k] = 1.0
        ex.params["proc.msg.l1.w"][0, 0] = 1.0
        ex.params["proc.upd.l0.w"][0, k] = 1.0
        ex.params["proc.upd.l1.w"][0, 0] = 1.0
    ex.freeze()
    return ex
