import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from higda.global_graph import GoGConfig, build_model  # noqa: E402
from higda.local_graph import LoGConfig  # noqa: E402


def tiny_configs(**log_kw):
    log = dict(patch_size=4, embed_dim=8, layers=2, k_neighbors=3, ffn_expansion=2)
    log.update(log_kw)
    return LoGConfig(**log), GoGConfig(hidden_dim=12, out_dim=8)


@pytest.fixture
def tiny_model():
    log, gog = tiny_configs()
    return build_model(log, gog, num_classes=5, image_size=16, seed=3, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_images(rng, n, size=16):
    return rng.random((n, size, size, 3))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
