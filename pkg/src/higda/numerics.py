"""Differentiable substrate shared by every other module.

Tensors are ``torch.Tensor`` values; autograd supplies backward passes for the
handful of primitives used here. The optimizer, the tensor file format and the
finite-difference oracle are implemented locally so their contracts are exact.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

TENSOR_MAGIC = "higda-tensor v1"


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class OracleError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    """Non-finite values where finite ones are required."""


def dtype_for(precision: str) -> torch.dtype:
    if precision == "float64":
        return torch.float64
    if precision == "float32":
        return torch.float32
    raise ValueError(f"unknown precision {precision!r}")


# ---------------------------------------------------------------------------
# primitives


def affine_forward(x: torch.Tensor, m: nn.Linear) -> torch.Tensor:
    """``weight @ x + bias`` over the trailing axis of ``x``."""
    if x.shape[-1] != m.in_features:
        raise DimensionError(
            f"affine map expects {m.in_features} inputs, got trailing dim {x.shape[-1]}"
        )
    return F.linear(x, m.weight, m.bias)


def activation(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    if name == "gelu":
        return F.gelu
    if name == "relu":
        return F.relu
    raise ValueError(f"unknown activation {name!r}")


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


class Standardize(nn.Module):
    """Per-feature standardization with learnable scale and shift.

    Statistics are taken over the feature axis of each row, so the result never
    depends on what else is in the batch.
    """

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, self.scale.shape, self.scale, self.shift, self.eps)


class Projection(nn.Module):
    """Affine map optionally followed by standardization."""

    def __init__(self, d_in: int, d_out: int, normalize: bool = True):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out)
        self.norm = Standardize(d_out) if normalize else None

    def forward(self, x):
        y = affine_forward(x, self.linear)
        if self.norm is not None:
            y = self.norm(y)
        return y


# ---------------------------------------------------------------------------
# run context


class RunContext:
    """Single seeded generator for every stochastic choice in a run."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self.rng.integers(0, 2**63 - 1)))
        return g

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self.rng.bit_generator.state}

    def set_state(self, state: Mapping) -> None:
        self.seed = int(state["seed"])
        self.rng.bit_generator.state = state["bit_generator"]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


class ModelState:
    """Trainable parameters of a model plus optimizer buffers and group tags.

    ``groups`` maps every parameter name to exactly one of the minimax groups
    (``"log"`` or ``"gog"``).
    """

    def __init__(self, model: nn.Module, groups: Optional[Mapping[str, str]] = None):
        self.model = model
        self.params: Dict[str, nn.Parameter] = dict(model.named_parameters())
        if groups is None:
            groups = {name: name.split(".", 1)[0] for name in self.params}
        self.groups = dict(groups)
        self.momentum: Dict[str, torch.Tensor] = {
            name: torch.zeros_like(p, memory_format=torch.contiguous_format)
            for name, p in self.params.items()
        }
        self.step = 0

    def names(self):
        return list(self.params)

    def zero_grads(self) -> Dict[str, torch.Tensor]:
        return {n: torch.zeros_like(p) for n, p in self.params.items()}

    def grads_of(self, loss: torch.Tensor, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
        names = self.names()
        tensors = torch.autograd.grad(
            loss, [self.params[n] for n in names], allow_unused=True, retain_graph=retain_graph
        )
        return {
            n: (g if g is not None else torch.zeros_like(self.params[n]))
            for n, g in zip(names, tensors)
        }


@torch.no_grad()
def sgd_step(state: ModelState, grads: Mapping[str, torch.Tensor], cfg: SgdConfig) -> ModelState:
    """Momentum SGD with coupled weight decay.

    ``b <- momentum * b + g + wd * p`` then ``p <- p - lr * b``.
    """
    missing = [n for n in state.params if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for parameters: {missing}")
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        buf = state.momentum[name]
        buf.mul_(cfg.momentum).add_(g).add_(p, alpha=cfg.weight_decay)
        p.sub_(buf, alpha=cfg.learning_rate)
    state.step += 1
    return state


def add_grads(*sets: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    out: Dict[str, torch.Tensor] = {}
    for s in sets:
        for n, g in s.items():
            out[n] = out[n] + g if n in out else g.clone()
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    state: ModelState,
    eps: float = 1e-5,
    max_entries: int = 200,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
) -> float:
    """Max relative error between autograd and central differences.

    Samples up to ``max_entries`` scalar parameter entries (spread across all
    tensors) and returns ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    for p in state.params.values():
        if p.dtype != torch.float64:
            raise ContractError("finite-difference checks require 64-bit parameters")

    with torch.no_grad():
        first = float(loss_fn())
        second = float(loss_fn())
    if first != second:
        raise OracleError(f"loss_fn is not deterministic: {first!r} != {second!r}")

    names = list(names) if names is not None else state.names()
    loss = loss_fn()
    analytic = state.grads_of(loss)

    rng = np.random.default_rng(seed)
    entries = [(n, i) for n in names for i in range(state.params[n].numel())]
    if len(entries) > max_entries:
        # keep at least one entry of every tensor, then fill at random
        chosen = {(n, int(rng.integers(state.params[n].numel()))) for n in names}
        rest = [e for e in entries if e not in chosen]
        extra = max(0, max_entries - len(chosen))
        picks = rng.choice(len(rest), size=min(extra, len(rest)), replace=False)
        entries = sorted(chosen | {rest[int(k)] for k in picks})

    worst = 0.0
    with torch.no_grad():
        for name, idx in entries:
            flat = state.params[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = float(loss_fn())
            flat[idx] = orig - eps
            down = float(loss_fn())
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[idx].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# binary tensor dump


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype="<f8")
    header = f"{TENSOR_MAGIC} {arr.ndim}" + "".join(f" {d}" for d in arr.shape) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    end = blob.find(b"\n")
    if end < 0:
        raise ValueError("missing tensor header")
    parts = blob[:end].decode("ascii").split()
    if " ".join(parts[:2]) != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic: {blob[:end]!r}")
    rank = int(parts[2])
    dims = tuple(int(d) for d in parts[3:])
    if len(dims) != rank:
        raise ValueError("tensor header rank does not match dims")
    body = blob[end + 1:]
    n = math.prod(dims)
    if len(body) != 8 * n:
        raise ValueError(f"tensor body has {len(body)} bytes, expected {8 * n}")
    return np.frombuffer(body, dtype="<f8").reshape(dims).copy()


def save_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
