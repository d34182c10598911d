"""Losses and the signed minimax gradient combination."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

import torch

from .numerics import ContractError

logger = logging.getLogger(__name__)

EDGE_CLAMP = 1e-7
_clamp_warned = False


@dataclass
class LossReport:
    node_loss: float
    edge_loss: float
    total: float
    entropy: Optional[float] = None

    def row(self, step: int):
        ent = "" if self.entropy is None else repr(self.entropy)
        return [step, repr(self.node_loss), repr(self.edge_loss), ent, repr(self.total)]


@dataclass
class MinimaxConfig:
    # "lambda" is a keyword; the config file key is still "lambda"
    lam: float = 0.1
    method: str = "none"
    plugin: Optional[str] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.method not in ("none", "mme", "plugin"):
            raise ValueError(f"method must be none, mme or plugin, got {self.method!r}")
        if self.method == "plugin" and not self.plugin:
            raise ValueError("method 'plugin' needs a registered plugin name")


def node_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the (pseudo-)label of every row."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=probs.device)
    if probs.shape[0] != labels.shape[0]:
        raise ContractError("probabilities and labels have different lengths")
    if probs.shape[0] == 0:
        raise ContractError("node loss over an empty batch")
    if (labels < 0).any():
        raise ContractError("node loss received an unlabeled row")
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(torch.finfo(probs.dtype).tiny)).mean()


def edge_loss(a_hat: torch.Tensor, gt_edges: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean binary cross-entropy over defined off-diagonal pairs."""
    n = a_hat.shape[0]
    gt = torch.as_tensor(gt_edges, dtype=a_hat.dtype, device=a_hat.device)
    defined = ~torch.eye(n, dtype=torch.bool, device=a_hat.device)
    if mask is not None:
        defined = defined & torch.as_tensor(mask, dtype=torch.bool, device=a_hat.device)
    if not defined.any():
        return a_hat.sum() * 0.0
    a = a_hat[defined]
    e = gt[defined]
    lo, hi = EDGE_CLAMP, 1.0 - EDGE_CLAMP
    if bool(((a < lo) | (a > hi)).any()):
        global _clamp_warned
        # once per process; saturated sigmoids recur every step late in training
        (logger.debug if _clamp_warned else logger.warning)(
            "edge scores outside [%g, 1 - %g] clamped before log", lo, lo)
        _clamp_warned = True
    a = a.clamp(lo, hi)
    return -(e * torch.log(a) + (1 - e) * torch.log(1 - a)).mean()


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of the rows; 0 * log 0 counts as 0."""
    if probs.shape[0] == 0:
        raise ContractError("entropy over an empty batch")
    return -torch.special.xlogy(probs, probs).sum(dim=1).mean()


def higda_loss(out, labels, gt_edges, edge_mask=None):
    """Node + edge loss at unit weights. Returns (total tensor, LossReport)."""
    ln = node_loss(out.probs, labels)
    le = edge_loss(out.affinity, gt_edges, edge_mask)
    total = ln + le
    node, edge = ln.item(), le.item()
    report = LossReport(node_loss=node, edge_loss=edge, total=node + edge)
    return total, report


# adversarial-loss plugins: fn(model_output_on_unlabeled) -> scalar tensor.
# The signed update treats the returned loss exactly like the entropy term.
ADVERSARIAL_LOSSES: Dict[str, Callable] = {}


def register_adversarial_loss(name: str, fn: Callable) -> None:
    ADVERSARIAL_LOSSES[name] = fn


def adversarial_term(cfg: MinimaxConfig, out) -> Optional[torch.Tensor]:
    if cfg.method == "none":
        return None
    if cfg.method == "mme":
        return entropy_loss(out.probs)
    try:
        fn = ADVERSARIAL_LOSSES[cfg.plugin]
    except KeyError:
        raise ContractError(f"no adversarial loss registered as {cfg.plugin!r}") from None
    return fn(out)


def minimax_apply(grads_H: Mapping[str, torch.Tensor], cfg: MinimaxConfig,
                  groups: Mapping[str, str]) -> Dict[str, torch.Tensor]:
    """Scale entropy gradients by +lambda for LoG parameters, -lambda for GoG.

    Added to the supervised gradients, this makes the backbone descend and the
    head ascend the unlabeled entropy in one combined step.
    """
    out = {}
    for name, g in grads_H.items():
        group = groups.get(name)
        if group == "log":
            out[name] = g * cfg.lam
        elif group == "gog":
            out[name] = g * -cfg.lam
        else:
            raise ContractError(f"parameter {name!r} is not assigned to exactly one group (got {group!r})")
    return out


class LossLog:
    header = ["step", "node_loss", "edge_loss", "entropy", "total"]

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(self.header)

    def write(self, step: int, report: LossReport):
        self.writer.writerow(report.row(step))

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
