"""Local-graph (LoG) network: patch nodes, dynamic k-NN edges, max-relative
aggregation and max-pool readout to one global node vector per image."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .numerics import NumericalError, Projection, activation, affine_forward


class ConfigError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@dataclass
class LoGConfig:
    patch_size: int = 4
    embed_dim: int = 48
    layers: int = 4
    k_neighbors: int = 5
    use_positional: bool = True
    ffn_expansion: int = 4
    activation: str = "gelu"
    normalize: bool = True
    # 2x2 node merge after this many blocks; None keeps a single resolution
    merge_after: Optional[int] = None

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.patch_size < 1 or self.embed_dim < 1 or self.k_neighbors < 1:
            raise ConfigError("patch_size, embed_dim and k_neighbors must be positive")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1")

    def grid(self, height: int, width: int) -> Tuple[int, int]:
        if height % self.patch_size or width % self.patch_size:
            raise ConfigError(
                f"image {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        return height // self.patch_size, width // self.patch_size


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, values in [0, 1]
    label: Optional[int] = None
    sample_id: str = ""


@dataclass
class LocalGraph:
    nodes: torch.Tensor  # [N, D] or [B, N, D]
    grid_shape: Tuple[int, int]
    edges: Optional[torch.Tensor] = None  # [N, K] / [B, N, K] neighbor indices


def pixels_tensor(img, dtype=torch.float64) -> torch.Tensor:
    if isinstance(img, ImageSample):
        img = img.pixels
    if isinstance(img, torch.Tensor):
        return img.to(dtype)
    return torch.as_tensor(np.asarray(img), dtype=dtype)


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, H, W, 3] -> [B, N, patch*patch*3] in row-major patch order."""
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    x = x.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def embed_patches(img, cfg: LoGConfig, patch_embed: nn.Linear,
                  positional: Optional[torch.Tensor] = None) -> LocalGraph:
    """Flatten each patch, map it affinely, add the positional row if enabled."""
    x = pixels_tensor(img, patch_embed.weight.dtype)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    grid = cfg.grid(x.shape[1], x.shape[2])
    nodes = affine_forward(patchify(x, cfg.patch_size), patch_embed)
    if cfg.use_positional and positional is not None:
        nodes = nodes + positional
    return LocalGraph(nodes=nodes[0] if single else nodes, grid_shape=grid)


@torch.no_grad()
def knn_edges(nodes: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest other nodes by Euclidean distance.

    Works on [N, D] or [B, N, D]. Ties resolve to the smaller node index.
    """
    n = nodes.shape[-2]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of nodes {n}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    x = nodes.detach()
    if not torch.isfinite(x).all():
        raise NumericalError("non-finite node features in k-NN construction")
    dist = torch.cdist(x, x, compute_mode="donot_use_mm_for_euclid_dist")
    eye = torch.eye(n, dtype=torch.bool, device=x.device)
    dist = dist.masked_fill(eye, float("inf"))
    # k-th smallest distance per row; everything strictly closer is in, and
    # entries equal to it are admitted in ascending index order
    kth = torch.topk(dist, k, dim=-1, largest=False, sorted=False).values.max(dim=-1, keepdim=True).values
    closer = dist < kth
    tied = dist == kth
    room = k - closer.sum(dim=-1, keepdim=True)
    take = closer | (tied & (torch.cumsum(tied.to(torch.int32), dim=-1) <= room))
    idx = torch.nonzero(take)[:, -1].view(*dist.shape[:-1], k)
    order = torch.sort(dist.gather(-1, idx), dim=-1, stable=True).indices
    return idx.gather(-1, order).contiguous()


def gather_neighbors(u: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
    """u [B, N, D], edges [B, N, K] -> [B, N, K, D]."""
    b = u.shape[0]
    batch = torch.arange(b, device=u.device).view(b, 1, 1)
    return u[batch, edges]


def max_relative_aggregate(g: LocalGraph, pre_proj, f, post_proj, act="gelu") -> torch.Tensor:
    """One graph layer: ``v + post(act(f([u ; max_j (u - u_j)])))`` with ``u = pre(v)``."""
    if g.edges is None:
        raise GraphError("local graph has no edges")
    if g.edges.shape[-1] == 0:
        raise GraphError("node with empty neighbor list")
    sigma = activation(act) if isinstance(act, str) else act
    v, edges = g.nodes, g.edges
    single = v.dim() == 2
    if single:
        v, edges = v.unsqueeze(0), edges.unsqueeze(0)
    u = pre_proj(v)
    rel = u.unsqueeze(2) - gather_neighbors(u, edges)
    m = rel.max(dim=2).values
    out = v + post_proj(sigma(f(torch.cat([u, m], dim=-1))))
    return out[0] if single else out


def _call(m):
    if isinstance(m, nn.Linear):
        return lambda x: affine_forward(x, m)
    return m


class GrapherBlock(nn.Module):
    def __init__(self, dim: int, act: str, normalize: bool):
        super().__init__()
        self.act = act
        self.pre = Projection(dim, dim, normalize)
        self.f = nn.Linear(2 * dim, dim)
        self.post = Projection(dim, dim, normalize)

    def forward(self, g: LocalGraph) -> torch.Tensor:
        return max_relative_aggregate(g, self.pre, _call(self.f), self.post, self.act)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, act: str, normalize: bool):
        super().__init__()
        self.act = activation(act)
        self.up = Projection(dim, dim * expansion, normalize)
        self.down = Projection(dim * expansion, dim, normalize)

    def forward(self, x):
        return x + self.down(self.act(self.up(x)))


class NodeMerge(nn.Module):
    """Merge each 2x2 block of grid nodes into one node."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, grid: Tuple[int, int]):
        rows, cols = grid
        if rows % 2 or cols % 2:
            raise ConfigError(f"cannot merge an odd node grid {rows}x{cols}")
        b, _, d = x.shape
        x = x.reshape(b, rows // 2, 2, cols // 2, 2, d).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (rows // 2) * (cols // 2), 4 * d)
        return affine_forward(x, self.proj), (rows // 2, cols // 2)


@dataclass
class LoGTrace:
    """Intermediate results of one forward pass, kept for inspection."""
    final_nodes: torch.Tensor  # [B, N_final, D], input to the readout
    final_edges: torch.Tensor  # [B, N_final, K] edges used by the last block
    grid_shape: Tuple[int, int]
    edges: List[torch.Tensor] = field(default_factory=list)


class LocalGraphNetwork(nn.Module):
    def __init__(self, cfg: LoGConfig, image_size: int):
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.grid(image_size, image_size)
        n_nodes = self.grid[0] * self.grid[1]
        if cfg.k_neighbors >= n_nodes:
            raise ConfigError(f"k_neighbors={cfg.k_neighbors} must be < number of nodes {n_nodes}")
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size * cfg.patch_size * 3, d)
        if cfg.use_positional:
            self.positional = nn.Parameter(torch.randn(n_nodes, d) * 0.02)
        else:
            self.register_parameter("positional", None)
        self.graphers = nn.ModuleList(GrapherBlock(d, cfg.activation, cfg.normalize) for _ in range(cfg.layers))
        self.ffns = nn.ModuleList(
            FeedForward(d, cfg.ffn_expansion, cfg.activation, cfg.normalize) for _ in range(cfg.layers)
        )
        if cfg.merge_after is not None:
            if not 0 < cfg.merge_after < cfg.layers:
                raise ConfigError("merge_after must fall strictly inside the block stack")
            merged = (self.grid[0] // 2) * (self.grid[1] // 2)
            if cfg.k_neighbors >= merged:
                raise ConfigError("k_neighbors too large for the merged node grid")
            self.merge = NodeMerge(d)
        else:
            self.merge = None

    @property
    def out_dim(self) -> int:
        return self.cfg.embed_dim

    def forward(self, images: torch.Tensor, trace: bool = False):
        """images [B, H, W, 3] -> global node vectors [B, D]."""
        g = embed_patches(images, self.cfg, self.patch_embed, self.positional)
        x, grid = g.nodes, g.grid_shape
        if x.dim() == 2:
            x = x.unsqueeze(0)
        all_edges = []
        edges = None
        for i, (grapher, ffn) in enumerate(zip(self.graphers, self.ffns)):
            if self.merge is not None and i == self.cfg.merge_after:
                x, grid = self.merge(x, grid)
            edges = knn_edges(x, self.cfg.k_neighbors)
            all_edges.append(edges)
            x = grapher(LocalGraph(nodes=x, grid_shape=grid, edges=edges))
            x = ffn(x)
        readout = x.max(dim=1).values
        if trace:
            return readout, LoGTrace(final_nodes=x, final_edges=edges, grid_shape=grid, edges=all_edges)
        return readout


def log_forward(img, cfg: LoGConfig, params: LocalGraphNetwork) -> torch.Tensor:
    """Global node vector [D_G] for a single image."""
    if params.cfg != cfg:
        raise ConfigError("network was built for a different LoGConfig")
    x = pixels_tensor(img, params.patch_embed.weight.dtype)
    return params(x.unsqueeze(0))[0]


# ---------------------------------------------------------------------------
# saliency


@dataclass
class SaliencyResult:
    saliency: np.ndarray  # [N_L] in [0, 1]
    grid_shape: Tuple[int, int]
    anchors: List[dict]  # [{"node": i, "neighbors": [...]}, ...]
    final_edges: np.ndarray  # [N_L, K]


def node_saliency(img, model, target_class: int, n_anchors: int = 2) -> SaliencyResult:
    """Gradient-norm saliency of the final local nodes for one class logit.

    The image is classified on its own (batch of one global node).
    """
    num_classes = model.num_classes
    if not 0 <= int(target_class) < num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {num_classes})")
    dtype = model.dtype
    x = pixels_tensor(img, dtype).unsqueeze(0)
    with torch.enable_grad():
        _, tr = model.log(x, trace=True)
        nodes = tr.final_nodes.detach().requires_grad_(True)
        out = model.gog(nodes.max(dim=1).values)
        logit = out.logits[0, int(target_class)]
        (grad,) = torch.autograd.grad(logit, nodes, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(nodes)
    norms = grad[0].norm(dim=-1).detach().cpu().numpy().astype(np.float64)
    top = float(norms.max()) if norms.size else 0.0
    sal = norms / top if top > 0 else np.zeros_like(norms)
    edges = tr.final_edges[0].cpu().numpy()
    # stable: equal saliency resolves to the lower node index
    order = np.argsort(-sal, kind="stable")[:n_anchors]
    anchors = [{"node": int(i), "neighbors": [int(j) for j in edges[i]]} for i in order]
    return SaliencyResult(saliency=sal, grid_shape=tr.grid_shape, anchors=anchors, final_edges=edges)


def export_saliency(result: SaliencyResult, out_dir, image_id: str) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{image_id}_saliency.csv"
    json_path = out_dir / f"{image_id}_edges.json"
    cols = result.grid_shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index", "row", "col", "saliency"])
        for i, s in enumerate(result.saliency):
            w.writerow([i, i // cols, i % cols, repr(float(s))])
    json_path.write_text(json.dumps({"anchors": result.anchors}, indent=2))
    return csv_path, json_path
