"""Graph Active Learning: episodic pseudo-labelling of unlabeled target data,
labeled-pool replacement and the edge rule over mixed label provenance."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch

from .data import ImageSet
from .global_graph import GROUND_TRUTH, PSEUDO, UNLABELED, predict
from .numerics import ContractError

logger = logging.getLogger(__name__)


@dataclass
class GalConfig:
    tau: float = 0.95
    episodes: int = 10
    steps_per_episode: int = 100

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie strictly between 0 and 1")
        if self.episodes < 0 or self.steps_per_episode < 0:
            raise ValueError("episodes and steps_per_episode must be >= 0")


@dataclass
class PseudoSet:
    ids: List[str]
    indices: np.ndarray  # rows of the unlabeled set
    labels: np.ndarray
    confidence: np.ndarray
    images: np.ndarray

    def __len__(self):
        return len(self.ids)

    @staticmethod
    def empty(image_shape=(0, 0, 3)) -> "PseudoSet":
        return PseudoSet([], np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0),
                         np.zeros((0,) + tuple(image_shape), np.float32))

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "pseudo_label", "confidence"])
            for sid, y, c in zip(self.ids, self.labels, self.confidence):
                w.writerow([sid, int(y), repr(float(c))])


@dataclass
class LabeledPool:
    """Ground-truth base set plus the current episode's pseudo-labels."""
    base: ImageSet
    pseudo: PseudoSet = None
    episode: int = 0
    _cache: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.pseudo is None:
            self.pseudo = PseudoSet.empty(self.base.images.shape[1:])

    def __len__(self):
        return len(self.base) + len(self.pseudo)

    @property
    def ids(self) -> List[str]:
        return list(self.base.ids) + list(self.pseudo.ids)

    def arrays(self):
        """(images, labels, provenance) over base followed by pseudo rows."""
        if self._cache is None:
            images = np.concatenate([self.base.images, self.pseudo.images]) if len(self.pseudo) else self.base.images
            labels = np.concatenate([self.base.labels, self.pseudo.labels]).astype(np.int64)
            prov = np.concatenate([np.full(len(self.base), GROUND_TRUTH), np.full(len(self.pseudo), PSEUDO)])
            self._cache = (images, labels, prov.astype(np.int64))
        return self._cache


def pseudo_from_probs(probs, unlabeled: ImageSet, tau: float) -> PseudoSet:
    probs = torch.as_tensor(probs)
    conf, label = probs.max(dim=1)  # first maximal index on ties
    keep = torch.nonzero(conf >= tau).flatten().cpu().numpy()
    return PseudoSet(ids=[unlabeled.ids[i] for i in keep], indices=keep.astype(np.int64),
                     labels=label[keep].cpu().numpy().astype(np.int64),
                     confidence=conf[keep].cpu().numpy().astype(np.float64),
                     images=unlabeled.images[keep])


def generate_pseudo_labels(model, unlabeled: ImageSet, tau: float, batch_size: int = 32) -> PseudoSet:
    """Keep samples whose top class probability is at least ``tau``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie strictly between 0 and 1")
    if len(unlabeled) == 0:
        return PseudoSet.empty(unlabeled.images.shape[1:])
    probs, _ = predict(model, unlabeled.images, batch_size, mode="batch_graph")
    return pseudo_from_probs(probs, unlabeled, tau)


def update_pool(pool: LabeledPool, pseudo: PseudoSet, episode: int) -> LabeledPool:
    """Replace the pseudo part of the pool; base samples are never relabelled."""
    base_ids = set(pool.base.ids)
    keep = [i for i, sid in enumerate(pseudo.ids) if sid not in base_ids]
    if len(keep) != len(pseudo):
        pseudo = PseudoSet([pseudo.ids[i] for i in keep], pseudo.indices[keep], pseudo.labels[keep],
                           pseudo.confidence[keep], pseudo.images[keep])
    return LabeledPool(base=pool.base, pseudo=pseudo, episode=episode)


def mixed_edge_rule(a: Tuple[int, int], b: Tuple[int, int]) -> int:
    """Edge between two (provenance, class) labels: 1 iff the classes agree."""
    (pa, ya), (pb, yb) = a, b
    if pa == UNLABELED or pb == UNLABELED:
        raise ContractError("edge rule is undefined for unlabeled samples")
    if pa not in (GROUND_TRUTH, PSEUDO) or pb not in (GROUND_TRUTH, PSEUDO):
        raise ContractError(f"unknown provenance {pa!r} / {pb!r}")
    return int(ya == yb)


def build_gt_edges(labels, provenance) -> Tuple[torch.Tensor, torch.Tensor]:
    """Vectorised edge rule: (edges, mask) where mask marks pairs with both ends labeled."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    provenance = torch.as_tensor(provenance, dtype=torch.long)
    known = provenance != UNLABELED
    mask = known.unsqueeze(0) & known.unsqueeze(1)
    edges = (labels.unsqueeze(0) == labels.unsqueeze(1)) & mask
    return edges.to(torch.int64), mask


@dataclass
class EpisodeMetrics:
    episode: int
    pseudo_count: int
    pseudo_accuracy: Optional[float]
    target_accuracy: float
    unlabeled_accuracy: Optional[float] = None

    header = ["episode", "pseudo_count", "pseudo_accuracy", "target_accuracy", "unlabeled_accuracy"]

    def row(self):
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.episode, self.pseudo_count, fmt(self.pseudo_accuracy),
                fmt(self.target_accuracy), fmt(self.unlabeled_accuracy)]


def write_episode_log(path, metrics: List[EpisodeMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpisodeMetrics.header)
        for m in metrics:
            w.writerow(m.row())


def run_gal(trainer, unlabeled: ImageSet, test: ImageSet, cfg: GalConfig,
            pool: Optional[LabeledPool] = None, base: Optional[ImageSet] = None,
            labels_known: bool = True, out_dir=None, loss_log=None):
    """Episodes of pseudo-label -> pool update -> fine-tune.

    ``trainer`` must already be pretrained on the base pool. Returns the final
    pool and one EpisodeMetrics per episode (episode 0 describes the model as
    passed in).
    """
    if pool is None:
        if base is None:
            raise ValueError("run_gal needs a pool or a base labeled set")
        pool = LabeledPool(base=base)
    model = trainer.model
    bs = trainer.cfg.batch_size
    metrics = [EpisodeMetrics(0, 0, None, trainer.evaluate(test).overall_accuracy)]
    out_dir = Path(out_dir) if out_dir is not None else None
    for q in range(1, cfg.episodes + 1):
        probs, _ = predict(model, unlabeled.images, bs, mode="batch_graph")
        pseudo = pseudo_from_probs(probs, unlabeled, cfg.tau)
        pseudo_acc = unl_acc = None
        if labels_known and len(unlabeled):
            truth = unlabeled.labels
            unl_acc = float((probs.argmax(dim=1).cpu().numpy() == truth).mean())
            if len(pseudo):
                pseudo_acc = float((pseudo.labels == truth[pseudo.indices]).mean())
        pool = update_pool(pool, pseudo, q)
        if out_dir is not None:
            pseudo.dump_csv(out_dir / f"pseudo_labels_ep{q:03d}.csv")
        trainer.fit(pool, cfg.steps_per_episode, unlabeled=unlabeled, loss_log=loss_log)
        acc = trainer.evaluate(test).overall_accuracy
        metrics.append(EpisodeMetrics(q, len(pseudo), pseudo_acc, acc, unl_acc))
        logger.info("episode %d: %d pseudo-labels (acc %s), target acc %.4f",
                    q, len(pseudo), pseudo_acc, acc)
    return pool, metrics
