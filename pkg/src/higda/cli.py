"""Command-line entry point: ``higda <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from .config import ConfigKeyError, RunConfig, dump_config, load_config
from .data import DataError, save_splits
from .gal import LabeledPool, run_gal, write_episode_log
from .global_graph import export_embeddings, predict
from .local_graph import export_saliency, node_saliency
from .objectives import LossLog
from .train_eval import (CheckpointError, NumericalError, Trainer, checkpoint_load, checkpoint_save,
                         image_size_of, load_data)

logger = logging.getLogger("higda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("gen-data", "train", "gal", "eval", "saliency", "embed")


class ConfigError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="higda", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="dotted config overrides, values parsed as JSON")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="key=value")
    p.add_argument("--output-dir", default="higda-out")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--checkpoint", help="checkpoint directory (eval, saliency, embed)")
    p.add_argument("--split", default="target_test",
                   choices=["source_labeled", "target_labeled", "target_unlabeled", "target_test"])
    p.add_argument("--index", type=int, default=0, help="image index within --split (saliency)")
    p.add_argument("--target-class", type=int, default=None, help="saliency class, default: predicted")
    p.add_argument("--png", action="store_true", help="gen-data: also write PNG files")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve_config(args) -> RunConfig:
    overrides = list(args.sets) + list(args.overrides)
    try:
        return load_config(args.config, overrides)
    except ConfigKeyError:
        raise
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


def _splits(cfg: RunConfig):
    try:
        return load_data(cfg)
    except DataError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _eval_all(trainer: Trainer, splits) -> dict:
    return {mode: trainer.evaluate(splits.target_test, mode).as_dict() for mode in trainer.cfg.eval_modes}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg, args, out: Path):
    splits = _splits(cfg)
    spec = cfg.data.synthetic if cfg.data.source == "synthetic" else None
    save_splits(out, splits, spec, png=args.png)
    print(f"wrote {sum(len(s) for s in splits.parts().values())} samples to {out}")


def _train_common(cfg, out: Path, episodes: bool):
    splits = _splits(cfg)
    trainer = Trainer.from_config(cfg, len(splits.source_labeled.class_names), image_size_of(cfg))
    pool = LabeledPool(base=splits.labeled())
    with LossLog(out / "metrics.csv") as log:
        trainer.fit(pool, cfg.pretrain_steps, unlabeled=splits.target_unlabeled, loss_log=log)
        if episodes:
            _, metrics = run_gal(trainer, splits.target_unlabeled, splits.target_test, cfg.gal,
                                 pool=pool, out_dir=out, loss_log=log)
            write_episode_log(out / "episodes.csv", metrics)
    report = _eval_all(trainer, splits)
    checkpoint_save(trainer, out / "checkpoint", extra={"eval": report})
    _write_json(out / "eval.json", report)
    for mode, r in report.items():
        print(f"{mode}: target accuracy {r['overall_accuracy']:.4f}")


def _load_checkpoint(args, out: Path) -> Trainer:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    trainer = checkpoint_load(args.checkpoint)
    # the checkpoint's own config is what actually runs
    dump_config(trainer.cfg, out / "config.json")
    return trainer


def cmd_eval(cfg, args, out: Path):
    trainer = _load_checkpoint(args, out)
    splits = _splits(trainer.cfg)
    report = _eval_all(trainer, splits)
    _write_json(out / "eval.json", report)
    for mode, r in report.items():
        print(f"{mode}: target accuracy {r['overall_accuracy']:.4f}")


def cmd_saliency(cfg, args, out: Path):
    trainer = _load_checkpoint(args, out)
    images = _splits(trainer.cfg).parts()[args.split]
    if not 0 <= args.index < len(images):
        raise DataError(f"--index {args.index} outside {args.split} (size {len(images)})")
    img = images.images[args.index]
    target = args.target_class
    if target is None:
        probs, _ = predict(trainer.model, img[None], mode="singleton")
        target = int(probs.argmax(dim=1)[0])
    res = node_saliency(img, trainer.model, target)
    image_id = images.ids[args.index].replace("/", "_")
    csv_path, json_path = export_saliency(res, out, image_id)
    print(f"wrote {csv_path} and {json_path}")


def cmd_embed(cfg, args, out: Path):
    trainer = _load_checkpoint(args, out)
    images = _splits(trainer.cfg).parts()[args.split]
    path = export_embeddings(trainer.model, images.images, out / f"embeddings_{args.split}.ht1",
                             trainer.cfg.batch_size)
    (out / f"embeddings_{args.split}_ids.txt").write_text("\n".join(images.ids) + "\n")
    print(f"wrote {path}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": lambda cfg, args, out: _train_common(cfg, out, episodes=False),
    "gal": lambda cfg, args, out: _train_common(cfg, out, episodes=True),
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "embed": cmd_embed,
}


def run_cli(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        torch.set_num_threads(args.threads)
    out = Path(args.output_dir)
    try:
        cfg = _resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.json")
        HANDLERS[args.command](cfg, args, out)
    except ConfigKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
