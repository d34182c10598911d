"""Global-graph (GoG) head: learned pairwise affinities between the images of a
mini-batch, symmetric normalization, affinity-weighted aggregation and a
linear classifier.  Also holds the full LoG + GoG model."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import torch
import torch.nn as nn

from .local_graph import LocalGraphNetwork, LoGConfig
from .numerics import ContractError, DimensionError, activation, affine_forward, save_tensor

UNLABELED = -1
GROUND_TRUTH = 0
PSEUDO = 1


@dataclass
class GoGConfig:
    depth: int = 1
    hidden_dim: int = 64
    out_dim: int = 48
    # "vector": |v_i - v_j| element-wise; "norm": scalar ||v_i - v_j||
    edge_input: str = "vector"
    activation: str = "gelu"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("GoG depth must be >= 1")
        if self.edge_input not in ("vector", "norm"):
            raise ValueError(f"edge_input must be 'vector' or 'norm', got {self.edge_input!r}")


@dataclass
class GlobalBatch:
    nodes: torch.Tensor  # [N_G, D_G]
    labels: torch.Tensor  # [N_G] class ids, -1 where unlabeled
    provenance: torch.Tensor  # [N_G] GROUND_TRUTH / PSEUDO / UNLABELED
    gt_edges: Optional[torch.Tensor] = None  # [N_G, N_G] in {0, 1}
    edge_mask: Optional[torch.Tensor] = None  # [N_G, N_G] pairs where gt_edges is defined


@dataclass
class AffinityMatrices:
    unnormalized: torch.Tensor
    normalized: torch.Tensor


@dataclass
class GoGOutput:
    logits: torch.Tensor
    probs: torch.Tensor
    affinity: torch.Tensor  # last layer's Â
    normalized: torch.Tensor  # last layer's A
    embeddings: torch.Tensor  # pre-classifier vectors


class TwoLayer(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, act="gelu"):
        super().__init__()
        self.act = activation(act)
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return affine_forward(self.act(affine_forward(x, self.fc1)), self.fc2)


def edge_scores(nodes: torch.Tensor, f_E: nn.Module, edge_input: str = "vector") -> torch.Tensor:
    """Â[i, j] = sigmoid(f_E(|v_i - v_j|))."""
    if nodes.dim() != 2:
        raise DimensionError(f"nodes must be [N, D], got {tuple(nodes.shape)}")
    diff = (nodes.unsqueeze(1) - nodes.unsqueeze(0)).abs()
    if edge_input == "norm":
        sq = (diff * diff).sum(dim=-1, keepdim=True)
        # sqrt has an infinite slope at 0; the diagonal carries no gradient anyway
        safe = torch.where(sq > 0, sq, torch.ones_like(sq))
        diff = torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))
    score = torch.sigmoid(f_E(diff).squeeze(-1))
    # the inputs are exactly symmetric but kernels may round the two triangles
    # differently; mirroring the upper triangle makes the result exact
    return torch.triu(score) + torch.triu(score, 1).transpose(0, 1)


def normalize_affinity(a_hat: torch.Tensor, tol: Optional[float] = None) -> torch.Tensor:
    """D^{-1/2} (Â + I) D^{-1/2} with D the row sums of Â + I."""
    if tol is None:
        tol = 1e-12 if a_hat.dtype == torch.float64 else 1e-6
    if a_hat.dim() != 2 or a_hat.shape[0] != a_hat.shape[1]:
        raise DimensionError(f"affinity must be square, got {tuple(a_hat.shape)}")
    if (a_hat - a_hat.T).abs().max().item() > tol:
        raise ContractError("affinity matrix is not symmetric")
    if (a_hat < 0).any():
        raise ContractError("affinity matrix has negative entries")
    m = a_hat + torch.eye(a_hat.shape[0], dtype=a_hat.dtype, device=a_hat.device)
    inv_sqrt = m.sum(dim=1).rsqrt()
    # the outer product is exactly symmetric, so A stays exactly symmetric too
    return m * (inv_sqrt.unsqueeze(1) * inv_sqrt.unsqueeze(0))


def aggregate_nodes(nodes: torch.Tensor, A: torch.Tensor, f_N: nn.Module) -> torch.Tensor:
    """v'_i = f_N([v_i ; sum_j A[i, j] v_j])."""
    if A.shape != (nodes.shape[0], nodes.shape[0]):
        raise DimensionError(f"affinity {tuple(A.shape)} does not match {nodes.shape[0]} nodes")
    return f_N(torch.cat([nodes, A @ nodes], dim=-1))


class GoGLayer(nn.Module):
    def __init__(self, d_in, cfg: GoGConfig):
        super().__init__()
        self.edge_input = cfg.edge_input
        edge_in = d_in if cfg.edge_input == "vector" else 1
        self.f_E = TwoLayer(edge_in, cfg.hidden_dim, 1, cfg.activation)
        self.f_N = TwoLayer(2 * d_in, cfg.hidden_dim, cfg.out_dim, cfg.activation)

    def forward(self, nodes):
        a_hat = edge_scores(nodes, self.f_E, self.edge_input)
        A = normalize_affinity(a_hat)
        return aggregate_nodes(nodes, A, self.f_N), AffinityMatrices(a_hat, A)


class GlobalGraphNetwork(nn.Module):
    def __init__(self, d_in: int, num_classes: int, cfg: GoGConfig):
        super().__init__()
        self.cfg = cfg
        dims = [d_in] + [cfg.out_dim] * cfg.depth
        self.layers = nn.ModuleList(GoGLayer(dims[i], cfg) for i in range(cfg.depth))
        self.classifier = nn.Linear(cfg.out_dim, num_classes)

    def forward(self, nodes: torch.Tensor) -> GoGOutput:
        if nodes.dim() != 2 or nodes.shape[0] < 1:
            raise DimensionError("GoG expects a non-empty [N_G, D_G] batch")
        x = nodes
        aff = None
        for layer in self.layers:
            x, aff = layer(x)
        logits = affine_forward(x, self.classifier)
        return GoGOutput(logits=logits, probs=torch.softmax(logits, dim=-1),
                         affinity=aff.unnormalized, normalized=aff.normalized, embeddings=x)


def gog_forward(batch: GlobalBatch, params: GlobalGraphNetwork):
    """Class probabilities and last-layer Â for a batch of global nodes."""
    out = params(batch.nodes)
    return out.probs, out.affinity


class HiGDA(nn.Module):
    """LoG backbone feeding the GoG head. Parameter names start with ``log.`` or ``gog.``."""

    def __init__(self, log_cfg: LoGConfig, gog_cfg: GoGConfig, num_classes: int, image_size: int):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.log = LocalGraphNetwork(log_cfg, image_size)
        self.gog = GlobalGraphNetwork(self.log.out_dim, num_classes, gog_cfg)

    @property
    def dtype(self):
        return self.log.patch_embed.weight.dtype

    def forward(self, images: torch.Tensor) -> GoGOutput:
        return self.gog(self.log(images))

    def parameter_groups(self):
        return {name: name.split(".", 1)[0] for name, _ in self.named_parameters()}


def build_model(log_cfg, gog_cfg, num_classes, image_size, seed=0, dtype=torch.float64) -> HiGDA:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = HiGDA(log_cfg, gog_cfg, num_classes, image_size)
    return model.to(dtype)


def batched(n: int, size: int) -> List[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


@torch.no_grad()
def predict(model: HiGDA, images, batch_size: int = 32, mode: str = "batch_graph"):
    """Probabilities and pre-classifier embeddings for a stack of images.

    ``batch_graph`` groups consecutive images into global graphs of
    ``batch_size``; ``singleton`` classifies each image on its own.
    """
    if mode not in ("batch_graph", "singleton"):
        raise ValueError(f"unknown eval mode {mode!r}")
    x = torch.as_tensor(images, dtype=model.dtype)
    if len(x) == 0:
        return torch.zeros(0, model.num_classes, dtype=model.dtype), torch.zeros(0, model.gog.cfg.out_dim, dtype=model.dtype)
    feats = torch.cat([model.log(x[s]) for s in batched(len(x), 64)])
    probs, embs = [], []
    step = batch_size if mode == "batch_graph" else 1
    for s in batched(len(x), step):
        out = model.gog(feats[s])
        probs.append(out.probs)
        embs.append(out.embeddings)
    return torch.cat(probs), torch.cat(embs)


def export_embeddings(model: HiGDA, images, path, batch_size=32, mode="batch_graph") -> Path:
    _, embs = predict(model, images, batch_size, mode)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(path, embs)
    return path
