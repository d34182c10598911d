"""Training driver, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import RunConfig, from_dict, to_dict
from .data import ImageSet, SsdaSplits, generate_synthetic, load_image_dir, load_splits, make_splits
from .gal import LabeledPool, build_gt_edges
from .global_graph import HiGDA, build_model, predict
from .numerics import (ModelState, NumericalError, RunContext, add_grads, dtype_for, load_tensor,
                       save_tensor, sgd_step)
from .objectives import LossReport, adversarial_term, higda_loss, minimax_apply

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "higda-checkpoint v1"


class CheckpointError(RuntimeError):
    pass


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: List[float]
    mean_class_accuracy: float
    mode: str
    count: int = 0

    def as_dict(self):
        return {"overall_accuracy": self.overall_accuracy, "per_class_accuracy": self.per_class_accuracy,
                "mean_class_accuracy": self.mean_class_accuracy, "mode": self.mode, "count": self.count}


def accuracy_report(pred, truth, num_classes: int, mode: str) -> EvalReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(truth) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    per_class = []
    for c in range(num_classes):
        sel = truth == c
        per_class.append(float((pred[sel] == c).mean()) if sel.any() else float("nan"))
    present = [a for a in per_class if not math.isnan(a)]
    return EvalReport(overall_accuracy=float((pred == truth).mean()), per_class_accuracy=per_class,
                      mean_class_accuracy=float(np.mean(present)), mode=mode, count=int(len(truth)))


def evaluate(model: HiGDA, test: ImageSet, mode: str = "batch_graph", batch_size: int = 32) -> EvalReport:
    """Accuracy with batch-level graphs (learned affinities only) or one image at a time."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    probs, _ = predict(model, test.images, batch_size, mode)
    return accuracy_report(probs.argmax(dim=1).cpu().numpy(), test.labels, model.num_classes, mode)


def load_data(cfg: RunConfig) -> SsdaSplits:
    d = cfg.data
    if d.source == "materialized":
        if not d.path:
            raise ValueError("data.path is required for materialized data")
        return load_splits(d.path)
    if d.source == "image_dir":
        if not (d.source_dir and d.target_dir):
            raise ValueError("data.source_dir and data.target_dir are required for image_dir data")
        source = load_image_dir(d.source_dir, d.image_size, "source")
        target = load_image_dir(d.target_dir, d.image_size, "target")
    else:
        source, target = generate_synthetic(d.synthetic)
    return make_splits(source, target, d.n_shot, d.split_seed, d.test_fraction)


def image_size_of(cfg: RunConfig) -> int:
    return cfg.data.synthetic.image_size if cfg.data.source == "synthetic" else cfg.data.image_size


class Trainer:
    """Owns the model state and the run's random generator."""

    def __init__(self, model: HiGDA, cfg: RunConfig, ctx: Optional[RunContext] = None):
        self.model = model
        self.cfg = cfg
        self.ctx = ctx if ctx is not None else RunContext(cfg.seed)
        self.state = ModelState(model, model.parameter_groups())

    @classmethod
    def from_config(cls, cfg: RunConfig, num_classes: int, image_size: int) -> "Trainer":
        ctx = RunContext(cfg.seed)
        init_seed = int(ctx.rng.integers(0, 2**31 - 1))
        model = build_model(cfg.log, cfg.gog, num_classes, image_size, seed=init_seed,
                            dtype=dtype_for(cfg.precision))
        return cls(model, cfg, ctx)

    @property
    def dtype(self):
        return self.model.dtype

    def _tensor(self, images):
        return torch.as_tensor(np.asarray(images), dtype=self.dtype)

    def train_step(self, images, labels, provenance, unlabeled_images=None,
                   learning_rate: Optional[float] = None) -> LossReport:
        """One combined update: supervised HiGDA loss plus the signed minimax term."""
        mm = self.cfg.minimax
        use_unlabeled = mm.method != "none" and unlabeled_images is not None and len(unlabeled_images) > 0
        x = self._tensor(images)
        n = len(x)
        if use_unlabeled:
            # one backbone pass over both sets; each set forms its own global graph
            feats = self.model.log(torch.cat([x, self._tensor(unlabeled_images)]))
            out, out_u = self.model.gog(feats[:n]), self.model.gog(feats[n:])
        else:
            out = self.model.gog(self.model.log(x))
        edges, mask = build_gt_edges(labels, provenance)
        total, report = higda_loss(out, labels, edges, mask)
        if not math.isfinite(report.total):
            raise NumericalError(f"non-finite loss at step {self.state.step}: {report}")
        if use_unlabeled:
            term = adversarial_term(mm, out_u)
            report.entropy = term.item()
            if not math.isfinite(report.entropy):
                raise NumericalError(f"non-finite adversarial loss at step {self.state.step}")
            grads = self.state.grads_of(total, retain_graph=True)
            signed = minimax_apply(self.state.grads_of(term), mm, self.state.groups)
            grads = add_grads(grads, signed)
        else:
            grads = self.state.grads_of(total)
        sgd = self.cfg.sgd
        if learning_rate is not None:
            if learning_rate == 0:
                # report-only step: parameters and momentum stay as they are
                self.state.step += 1
                return report
            sgd = type(sgd)(learning_rate=learning_rate, weight_decay=sgd.weight_decay, momentum=sgd.momentum)
        sgd_step(self.state, grads, sgd)
        return report

    def sample_labeled(self, pool: LabeledPool):
        images, labels, prov = pool.arrays()
        n = len(labels)
        size = min(self.cfg.batch_size, n)
        rng = self.ctx.rng
        if self.cfg.class_balanced:
            classes = np.unique(labels)
            picked_classes = rng.choice(classes, size=size, replace=True)
            idx = np.array([rng.choice(np.flatnonzero(labels == c)) for c in picked_classes])
        else:
            idx = rng.choice(n, size=size, replace=False)
        return images[idx], labels[idx], prov[idx]

    def sample_unlabeled(self, unlabeled: ImageSet):
        size = min(self.cfg.unlabeled_batch_size or self.cfg.batch_size, len(unlabeled))
        idx = self.ctx.rng.choice(len(unlabeled), size=size, replace=False)
        return unlabeled.images[idx]

    def fit(self, pool: LabeledPool, steps: int, unlabeled: Optional[ImageSet] = None,
            loss_log=None) -> List[LossReport]:
        reports = []
        use_unlabeled = self.cfg.minimax.method != "none" and unlabeled is not None and len(unlabeled) > 0
        for _ in range(steps):
            images, labels, prov = self.sample_labeled(pool)
            u = self.sample_unlabeled(unlabeled) if use_unlabeled else None
            report = self.train_step(images, labels, prov, u)
            if loss_log is not None:
                loss_log.write(self.state.step, report)
            reports.append(report)
        return reports

    def evaluate(self, test: ImageSet, mode: str = "batch_graph") -> EvalReport:
        return evaluate(self.model, test, mode, self.cfg.batch_size)


# ---------------------------------------------------------------------------
# checkpoints


def _safe(name: str) -> str:
    return name.replace("/", "_")


def checkpoint_save(trainer: Trainer, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in trainer.state.params.items():
        pf = f"params/{_safe(name)}.ht1"
        mf = f"params/momentum.{_safe(name)}.ht1"
        save_tensor(path / pf, p)
        save_tensor(path / mf, trainer.state.momentum[name])
        entries.append({"name": name, "shape": list(p.shape), "file": pf, "momentum": mf,
                        "group": trainer.state.groups[name]})
    m = trainer.model
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": to_dict(trainer.cfg),
        "num_classes": m.num_classes,
        "image_size": m.image_size,
        "step": trainer.state.step,
        "rng_state": trainer.ctx.get_state(),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def checkpoint_load(path, cfg: Optional[RunConfig] = None) -> Trainer:
    """Rebuild a trainer; with ``cfg`` given, the stored shapes must match its model."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json in {path}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    stored_cfg = from_dict(RunConfig, manifest["config"])
    cfg = cfg or stored_cfg
    model = build_model(cfg.log, cfg.gog, manifest["num_classes"], manifest["image_size"],
                        dtype=dtype_for(cfg.precision))
    trainer = Trainer(model, cfg, RunContext(cfg.seed))
    params = trainer.state.params
    stored = {e["name"]: e for e in manifest["params"]}
    if set(stored) != set(params):
        raise CheckpointError(f"parameter sets differ: {sorted(set(stored) ^ set(params))[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            e = stored[name]
            if list(p.shape) != list(e["shape"]):
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {e['shape']} vs model {list(p.shape)}")
            value = load_tensor(path / e["file"])
            buf = load_tensor(path / e["momentum"])
            if list(value.shape) != list(p.shape) or list(buf.shape) != list(p.shape):
                raise CheckpointError(f"tensor file for {name} does not match its manifest shape")
            p.copy_(torch.from_numpy(value))
            trainer.state.momentum[name].copy_(torch.from_numpy(buf))
    trainer.state.step = int(manifest["step"])
    trainer.ctx.set_state(manifest["rng_state"])
    return trainer
