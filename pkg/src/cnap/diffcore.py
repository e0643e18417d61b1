"""Differentiable building blocks shared by every learned module.

Parameters live in a :class:`ParamStore` (plain named torch tensors plus Adam
moments).  Autograd is delegated to torch; everything else here (layer
layout, Adam, finite-difference checking, relaxed sampling, the checkpoint
container) is implemented directly so the contracts stay explicit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0

CHECKPOINT_MAGIC = b"CNAPCKPT"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity", "tanh")


class NonFiniteError(ValueError):
    """Raised when a loss, logit vector or gradient contains NaN/inf."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ParamStore:
    """Named parameter arrays with gradient slots and Adam state.

    Gradients are the tensors' ``.grad`` fields.  Entries flagged
    non-trainable never receive optimizer updates and never require grad,
    although gradients still flow *through* them to their inputs.
    """

    def __init__(self, dtype: torch.dtype = torch.float32):
        self.dtype = dtype
        self.params: dict[str, torch.Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self.exp_avg: dict[str, torch.Tensor] = {}
        self.exp_avg_sq: dict[str, torch.Tensor] = {}
        self.step_count = 0

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = torch.as_tensor(np.asarray(value), dtype=self.dtype).clone()
        t.requires_grad_(trainable)
        self.params[name] = t
        self.trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name in self.names(prefix):
            self.trainable[name] = flag
            self.params[name].requires_grad_(flag)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_values(self, trainable_only: bool = False) -> int:
        return sum(
            t.numel() for n, t in self.params.items() if self.trainable[n] or not trainable_only
        )

    def copy(self, dtype: torch.dtype | None = None) -> "ParamStore":
        """Deep copy (values and trainable flags; optimizer state is reset)."""
        out = ParamStore(dtype or self.dtype)
        for name, t in self.params.items():
            out.add(name, t.detach().to(out.dtype).numpy(), self.trainable[name])
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.detach().cpu().numpy() for n, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            cur = self.params[name]
            if tuple(cur.shape) != tuple(value.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: store {tuple(cur.shape)}, file {tuple(value.shape)}"
                )
            with torch.no_grad():
                cur.copy_(torch.as_tensor(value, dtype=self.dtype))

    def fingerprint(self, prefix: str = "") -> str:
        """SHA-256 over the raw bytes of every parameter under ``prefix``."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.names(prefix)):
            h.update(name.encode())
            h.update(self.params[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, one activation per linear layer, optional layer norm.

    ``layer_norm="before_last"`` normalizes the input of the final linear
    layer (i.e. after the penultimate activation).
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()
    layer_norm: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("MlpSpec needs at least 2 widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        object.__setattr__(self, "widths", widths)
        acts = tuple(self.activations) or ("relu",) * (len(widths) - 2) + ("identity",)
        if len(acts) != len(widths) - 1:
            raise ValueError("need one activation per linear layer")
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)
        if self.layer_norm not in ("none", "before_last"):
            raise ValueError(f"bad layer_norm position {self.layer_norm!r}")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activations": list(self.activations),
            "layer_norm": self.layer_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]), d.get("layer_norm", "none"))


def init_linear(params: ParamStore, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False, trainable: bool = True) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    w = np.zeros((fan_out, fan_in)) if zero else rng.uniform(-bound, bound, size=(fan_out, fan_in))
    params.add(f"{prefix}.w", w, trainable)
    params.add(f"{prefix}.b", np.zeros(fan_out), trainable)


def linear(params: ParamStore, prefix: str, x: torch.Tensor) -> torch.Tensor:
    w = params[f"{prefix}.w"]
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"{prefix}: expected input width {w.shape[1]}, got {x.shape[-1]}")
    return x.to(w.dtype) @ w.T + params[f"{prefix}.b"]


def init_mlp(spec: MlpSpec, params: ParamStore, prefix: str, rng: np.random.Generator,
             trainable: bool = True) -> None:
    for i in range(spec.num_layers):
        init_linear(params, f"{prefix}.l{i}", spec.widths[i], spec.widths[i + 1], rng,
                    trainable=trainable)
    if spec.layer_norm == "before_last":
        width = spec.widths[-2]
        params.add(f"{prefix}.ln.gain", np.ones(width), trainable)
        params.add(f"{prefix}.ln.bias", np.zeros(width), trainable)


def _activate(x: torch.Tensor, tag: str) -> torch.Tensor:
    if tag == "relu":
        return torch.relu(x)
    if tag == "tanh":
        return torch.tanh(x)
    return x


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               epsilon: float = 1e-5) -> torch.Tensor:
    """Normalize over the last axis with population variance."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"layer_norm: gain/bias widths {gain.shape[-1]}/{bias.shape[-1]} != input {x.shape[-1]}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + epsilon) * gain + bias


def mlp_forward(spec: MlpSpec, params: ParamStore, x: torch.Tensor, prefix: str,
                record: dict | None = None) -> torch.Tensor:
    """Run the MLP on ``x`` (any leading batch shape).

    If ``record`` is given, the layer-norm output is stored under
    ``record["pre_last"]`` for instrumentation.
    """
    x = torch.as_tensor(x)
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"{prefix}.l0: expected input width {spec.widths[0]}, got {x.shape[-1]}")
    for i in range(spec.num_layers):
        if i == spec.num_layers - 1 and spec.layer_norm == "before_last":
            x = layer_norm(x, params[f"{prefix}.ln.gain"], params[f"{prefix}.ln.bias"])
            if record is not None:
                record["pre_last"] = x
        x = _activate(linear(params, f"{prefix}.l{i}", x), spec.activations[i])
    return x


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError(f"invalid Adam hyperparameters {self}")


def adam_step(params: ParamStore, hyper: AdamHyper, zero_grad: bool = False,
              max_grad_norm: float | None = None) -> None:
    """One bias-corrected Adam update of every trainable parameter with a gradient.

    The whole step is rejected (nothing changes) if any gradient is
    non-finite.  ``max_grad_norm`` clips the global gradient norm first.
    """
    live = [n for n, t in params.params.items() if params.trainable[n] and t.grad is not None]
    for name in live:
        if not torch.isfinite(params[name].grad).all():
            raise NonFiniteError(f"non-finite gradient in {name!r}", name)
    scale = 1.0
    if max_grad_norm is not None and live:
        total = math.sqrt(sum(float((params[n].grad.double() ** 2).sum()) for n in live))
        if total > max_grad_norm:
            scale = max_grad_norm / (total + 1e-12)
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    with torch.no_grad():
        for name in live:
            p = params[name]
            g = p.grad * scale
            if name not in params.exp_avg:
                params.exp_avg[name] = torch.zeros_like(p)
                params.exp_avg_sq[name] = torch.zeros_like(p)
            m = params.exp_avg[name]
            v = params.exp_avg_sq[name]
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            p.sub_(hyper.lr * (m / bc1) / (torch.sqrt(v / bc2) + hyper.eps))
    if zero_grad:
        params.zero_grad()


def grad_check(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore,
               h: float = 1e-5, names: Iterable[str] | None = None,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autograd and central differences.

    Runs on a float64 copy of ``params``.  For each checked parameter array
    the error is ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`` with norms taken
    over the checked entries; the maximum over arrays is returned.
    ``max_entries`` subsamples entries of large arrays.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    p64 = params.copy(torch.float64)
    names = list(names) if names is not None else [n for n in p64 if p64.trainable[n]]
    for n in names:
        p64.params[n].requires_grad_(True)
    loss = loss_fn(p64)
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    grads = torch.autograd.grad(loss, [p64[n] for n in names], allow_unused=True)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, g in zip(names, grads):
        t = p64[name]
        analytic = torch.zeros_like(t) if g is None else g.detach()
        flat = t.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = rng.choice(flat.numel(), size=max_entries, replace=False)
        fd = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn(p64))
                flat[i] = orig - h
                down = float(loss_fn(p64))
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
        a = analytic.view(-1).numpy()[idx]
        num = np.linalg.norm(a - fd)
        den = max(np.linalg.norm(a), np.linalg.norm(fd), 1e-8)
        worst = max(worst, num / den)
    return worst


def sample_gaussian_reparam(mu: torch.Tensor, log_sigma: torch.Tensor,
                            noise: torch.Tensor) -> torch.Tensor:
    if mu.shape != log_sigma.shape or mu.shape[-1] != noise.shape[-1]:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)}, log_sigma "
                         f"{tuple(log_sigma.shape)}, noise {tuple(noise.shape)}")
    sigma = torch.exp(torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    return mu + sigma * torch.as_tensor(noise, dtype=mu.dtype)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0)) + 1e-300)


def gumbel_softmax(logits: torch.Tensor, temperature: float, gumbel_noise,
                   hard: bool = False) -> torch.Tensor:
    """Relaxed one-hot sample over the last axis.

    With ``hard=True`` the forward value is the exact one-hot of the argmax
    while gradients are those of the relaxed sample (straight-through).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    g = torch.as_tensor(gumbel_noise, dtype=logits.dtype)
    soft = torch.softmax((logits + g) / temperature, dim=-1)
    if not hard:
        return soft
    one_hot = torch.nn.functional.one_hot(soft.argmax(-1), soft.shape[-1]).to(soft.dtype)
    return one_hot + soft - soft.detach()


class Categorical:
    """Categorical distribution over the last axis of ``logits``."""

    def __init__(self, logits: torch.Tensor):
        logits = torch.as_tensor(logits)
        if not torch.isfinite(logits).all():
            raise NonFiniteError("non-finite logits")
        self.logits = logits
        self.log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.exp(self.log_probs)

    def log_prob(self, index) -> torch.Tensor:
        index = torch.as_tensor(index, dtype=torch.long)
        if index.dim() == 0 and self.log_probs.dim() == 1:
            return self.log_probs[index]
        return torch.gather(self.log_probs, -1, index.unsqueeze(-1)).squeeze(-1)

    def entropy(self) -> torch.Tensor:
        p = self.probabilities
        return -(p * self.log_probs).sum(-1)

    def sample(self, rng: np.random.Generator) -> torch.Tensor:
        """Gumbel-max draw; shape = logits shape minus the last axis."""
        g = torch.as_tensor(sample_gumbel(rng, tuple(self.logits.shape)), dtype=self.logits.dtype)
        return (self.logits.detach() + g).argmax(-1)


# Checkpoint container -------------------------------------------------------
#
# MAGIC | u32 header_len | header JSON (utf-8) | u32 n_arrays |
#   per array: u16 name_len | name | u8 ndim | u32 dims[ndim] | <f4 data


def save_checkpoint(path: str | Path, module_name: str, spec: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "module_name": module_name, "spec": spec},
        sort_keys=True,
    ).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw_name = name.encode()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; arrays are float32."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    return header, arrays
