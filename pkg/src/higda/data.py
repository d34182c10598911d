"""Synthetic two-domain shape dataset, SSDA splits and a PNG directory loader."""
from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .numerics import load_tensor, save_tensor

logger = logging.getLogger(__name__)

FAMILIES = ("triangle", "square", "circle", "plus", "hexagram")
MOTIFS = ("single", "pair")
SUPERSAMPLE = 2


class DataError(ValueError):
    pass


@dataclass
class DomainShift:
    hue_rotation: float = 180.0  # degrees
    texture_noise: float = 0.12
    stroke_style: str = "outline"  # "filled" or "outline"

    def __post_init__(self):
        if self.stroke_style not in ("filled", "outline"):
            raise ValueError(f"stroke_style must be 'filled' or 'outline', got {self.stroke_style!r}")
        if self.texture_noise < 0:
            raise ValueError("texture_noise must be >= 0")


@dataclass
class SyntheticSpec:
    classes: int = 10
    per_domain: int = 500
    image_size: int = 32
    shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = DomainShift(**self.shift)
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.per_domain < self.classes * 10:
            raise ValueError("per_domain must be >= 10 * classes")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


@dataclass
class ImageSet:
    ids: List[str]
    images: np.ndarray  # [N, H, W, 3] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    domain: str = ""
    class_names: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet([self.ids[i] for i in idx], self.images[idx], self.labels[idx],
                        self.domain, list(self.class_names))

    @staticmethod
    def concat(sets: Sequence["ImageSet"]) -> "ImageSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            raise DataError("nothing to concatenate")
        return ImageSet(sum((s.ids for s in sets), []),
                        np.concatenate([s.images for s in sets]),
                        np.concatenate([s.labels for s in sets]),
                        "+".join(dict.fromkeys(s.domain for s in sets)),
                        list(sets[0].class_names))


@dataclass
class SsdaSplits:
    source_labeled: ImageSet
    target_labeled: ImageSet
    target_unlabeled: ImageSet
    target_test: ImageSet

    def labeled(self) -> ImageSet:
        return ImageSet.concat([self.source_labeled, self.target_labeled])

    def parts(self):
        return {"source_labeled": self.source_labeled, "target_labeled": self.target_labeled,
                "target_unlabeled": self.target_unlabeled, "target_test": self.target_test}


# ---------------------------------------------------------------------------
# rendering


def class_name(c: int) -> str:
    fam = FAMILIES[c % len(FAMILIES)]
    motif = MOTIFS[(c // len(FAMILIES)) % len(MOTIFS)]
    variant = c // (len(FAMILIES) * len(MOTIFS))
    return f"{fam}-{motif}" + (f"-v{variant}" if variant else "")


def _polygon_sd(px, py, cx, cy, r, n, theta):
    """Approximate signed distance to a regular n-gon with circumradius r."""
    apothem = r * math.cos(math.pi / n)
    dx, dy = px - cx, py - cy
    best = None
    for k in range(n):
        a = theta + math.pi / n + 2 * math.pi * k / n
        d = dx * math.cos(a) + dy * math.sin(a)
        best = d if best is None else np.maximum(best, d)
    return best - apothem


def _shape_sd(family, px, py, cx, cy, r, theta):
    if family == "triangle":
        return _polygon_sd(px, py, cx, cy, r, 3, theta)
    if family == "square":
        return _polygon_sd(px, py, cx, cy, r, 4, theta)
    if family == "circle":
        return np.hypot(px - cx, py - cy) - r * 0.85
    if family == "hexagram":
        return np.minimum(_polygon_sd(px, py, cx, cy, r, 3, theta),
                          _polygon_sd(px, py, cx, cy, r, 3, theta + math.pi))
    if family == "plus":
        c, s = math.cos(theta), math.sin(theta)
        u = (px - cx) * c + (py - cy) * s
        v = -(px - cx) * s + (py - cy) * c
        long, short = r, r * 0.34
        arm1 = np.maximum(np.abs(u) - long, np.abs(v) - short)
        arm2 = np.maximum(np.abs(u) - short, np.abs(v) - long)
        return np.minimum(arm1, arm2)
    raise ValueError(family)


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb((h / 360.0) % 1.0, s, v), dtype=np.float64)


def render_image(label: int, rng: np.random.Generator, size: int, *, hue_rotation=0.0,
                 texture_noise=0.0, stroke_style="filled") -> np.ndarray:
    fam = FAMILIES[label % len(FAMILIES)]
    motif = MOTIFS[(label // len(FAMILIES)) % len(MOTIFS)]
    variant = label // (len(FAMILIES) * len(MOTIFS))
    scale = 1.0 - 0.15 * min(variant, 4)
    hi = size * SUPERSAMPLE
    coords = (np.arange(hi) + 0.5) / hi
    py, px = np.meshgrid(coords, coords, indexing="ij")

    if motif == "single":
        r = rng.uniform(0.26, 0.34) * scale
        centers = [(rng.uniform(0.5 - 0.12, 0.5 + 0.12), rng.uniform(0.5 - 0.12, 0.5 + 0.12))]
    else:
        r = rng.uniform(0.15, 0.19) * scale
        phi = rng.uniform(0, 2 * math.pi)
        sep = rng.uniform(0.22, 0.27)
        mx, my = 0.5 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.04, 0.04)
        centers = [(mx + sep * math.cos(phi), my + sep * math.sin(phi)),
                   (mx - sep * math.cos(phi), my - sep * math.sin(phi))]
    theta = rng.uniform(0, 2 * math.pi)
    sd = None
    for cx, cy in centers:
        d = _shape_sd(fam, px, py, cx, cy, r, theta + rng.uniform(-0.3, 0.3))
        sd = d if sd is None else np.minimum(sd, d)
    if stroke_style == "outline":
        mask = np.abs(sd) <= 0.035
    else:
        mask = sd <= 0
    mask = mask.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))

    fg = _hsv(rng.uniform(0, 60) + hue_rotation, rng.uniform(0.7, 1.0), rng.uniform(0.8, 1.0))
    bg = _hsv(rng.uniform(0, 360), rng.uniform(0.0, 0.3), rng.uniform(0.1, 0.35))
    img = bg[None, None, :] * (1 - mask[..., None]) + fg[None, None, :] * mask[..., None]
    if texture_noise > 0:
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        freq = rng.uniform(0.3, 0.9)
        ang = rng.uniform(0, math.pi)
        stripes = np.sin(freq * (xx * math.cos(ang) + yy * math.sin(ang)) + rng.uniform(0, 2 * math.pi))
        img = img + texture_noise * (0.5 * stripes[..., None] + rng.normal(size=img.shape))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_domain(spec: SyntheticSpec, name: str, rng, **style) -> ImageSet:
    labels = np.arange(spec.per_domain) % spec.classes
    labels = labels[rng.permutation(spec.per_domain)]
    images = np.stack([render_image(int(y), rng, spec.image_size, **style) for y in labels])
    ids = [f"{name}-{i:05d}" for i in range(spec.per_domain)]
    return ImageSet(ids, images, labels.astype(np.int64), name,
                    [class_name(c) for c in range(spec.classes)])


def generate_synthetic(spec: SyntheticSpec):
    """(source, target) image sets; the target carries the configured shift."""
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    source = _render_domain(spec, "source", np.random.default_rng(src_seq))
    sh = spec.shift
    target = _render_domain(spec, "target", np.random.default_rng(tgt_seq),
                            hue_rotation=sh.hue_rotation, texture_noise=sh.texture_noise,
                            stroke_style=sh.stroke_style)
    return source, target


# ---------------------------------------------------------------------------
# splits


def make_splits(source: ImageSet, target: ImageSet, n_shot: int, seed: int,
                test_fraction: float = 0.2) -> SsdaSplits:
    """Per class: n_shot labeled, ``test_fraction`` held out, the rest unlabeled."""
    if n_shot < 1:
        raise DataError("n_shot must be >= 1")
    rng = np.random.default_rng(seed)
    labeled, test, unlabeled = [], [], []
    classes = np.unique(np.concatenate([source.labels, target.labels]))
    for c in classes:
        idx = np.flatnonzero(target.labels == c)
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) < n_shot + n_test or n_test < 1:
            raise DataError(f"class {c} has {len(idx)} target samples; need n_shot={n_shot} plus a test quota")
        idx = idx[rng.permutation(len(idx))]
        labeled.extend(idx[:n_shot])
        test.extend(idx[n_shot:n_shot + n_test])
        unlabeled.extend(idx[n_shot + n_test:])
    splits = SsdaSplits(source, target.subset(sorted(labeled)),
                        target.subset(sorted(unlabeled)), target.subset(sorted(test)))
    if len(splits.source_labeled) < 10 * len(splits.target_labeled):
        raise DataError(f"source set ({len(source)}) must be at least 10x the labeled target set "
                        f"({len(splits.target_labeled)})")
    return splits


# ---------------------------------------------------------------------------
# directory loader


def load_image_dir(root, image_size: int = 32, domain: str = "") -> ImageSet:
    """root/<class_name>/*.png, labels by sorted class-directory name."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"{root} has no class directories")
    ids, images, labels = [], [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DataError(f"class directory {cdir} is empty")
        for f in files:
            try:
                with Image.open(f) as im:
                    if im.format != "PNG":
                        raise OSError(f"format {im.format}")
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:  # undecodable or non-PNG files are skipped
                logger.warning("skipping %s: %s", f, exc)
                continue
            ids.append(f"{cdir.name}/{f.name}")
            images.append(arr)
            labels.append(label)
    if not ids:
        raise DataError(f"no decodable PNG files under {root}")
    return ImageSet(ids, np.stack(images), np.asarray(labels, dtype=np.int64),
                    domain or root.name, [p.name for p in class_dirs])


# ---------------------------------------------------------------------------
# manifest and materialization


def write_manifest(path, splits: SsdaSplits, extra: Optional[dict] = None) -> Path:
    samples = []
    for split, s in splits.parts().items():
        for sid, y in zip(s.ids, s.labels):
            samples.append({"id": sid, "split": split, "label": int(y),
                            "provenance": "ground_truth", "labeled": split in ("source_labeled", "target_labeled")})
    doc = {"format": "higda-manifest v1", "class_names": splits.source_labeled.class_names,
           "samples": samples}
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1))
    return path


def save_splits(out_dir, splits: SsdaSplits, spec: Optional[SyntheticSpec] = None, png: bool = False) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "datasets").mkdir(parents=True, exist_ok=True)
    for name, s in splits.parts().items():
        save_tensor(out_dir / "datasets" / f"{name}.ht1", s.images)
        if png:
            save_pngs(s, out_dir / "png" / name)
    extra = {"synthetic_spec": asdict(spec)} if spec is not None else None
    return write_manifest(out_dir / "manifest.json", splits, extra)


def load_splits(out_dir) -> SsdaSplits:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {out_dir}")
    doc = json.loads(manifest_path.read_text())
    names = doc["class_names"]
    parts = {}
    for split in ("source_labeled", "target_labeled", "target_unlabeled", "target_test"):
        rows = [s for s in doc["samples"] if s["split"] == split]
        images = load_tensor(out_dir / "datasets" / f"{split}.ht1").astype(np.float32)
        if len(images) != len(rows):
            raise DataError(f"{split}: {len(images)} images but {len(rows)} manifest rows")
        domain = "source" if split.startswith("source") else "target"
        parts[split] = ImageSet([r["id"] for r in rows], images,
                                np.asarray([r["label"] for r in rows], dtype=np.int64), domain, list(names))
    return SsdaSplits(**parts)


def save_pngs(s: ImageSet, out_dir) -> None:
    from PIL import Image

    for sid, img, y in zip(s.ids, s.images, s.labels):
        d = Path(out_dir) / (s.class_names[y] if s.class_names else str(int(y)))
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(d / f"{sid.replace('/', '_')}.png")
