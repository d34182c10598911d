"""Hierarchical graph-of-nodes classifier for semi-supervised domain adaptation."""

from .config import RunConfig, load_config
from .data import DomainShift, ImageSet, SsdaSplits, SyntheticSpec, generate_synthetic, make_splits
from .gal import GalConfig, run_gal
from .global_graph import GoGConfig, HiGDA, build_model, predict
from .local_graph import LoGConfig
from .train_eval import Trainer, evaluate

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "DomainShift", "ImageSet", "SsdaSplits", "SyntheticSpec",
           "generate_synthetic", "make_splits", "GalConfig", "run_gal", "GoGConfig", "HiGDA",
           "build_model", "predict", "LoGConfig", "Trainer", "evaluate"]
