import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_images
from higda.gal import build_gt_edges
from higda.numerics import ContractError, ModelState, finite_diff_check
from higda import objectives
from higda.objectives import (LossLog, LossReport, MinimaxConfig, adversarial_term, edge_loss, entropy_loss,
                              higda_loss, minimax_apply, node_loss, register_adversarial_loss)
from oracles import edge_loss_loop, entropy_loop, node_loss_loop


def f64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def random_probs(rng, n, c):
    return torch.softmax(f64(rng.normal(size=(n, c)) * 2), dim=1)


def test_node_loss_anchors():
    labels = torch.tensor([0, 3, 9, 4])
    assert node_loss(torch.full((4, 10), 0.1, dtype=torch.float64), labels).item() == pytest.approx(math.log(10), abs=1e-12)
    assert node_loss(torch.eye(10, dtype=torch.float64)[labels], labels).item() == 0.0


def test_node_loss_matches_loop(rng):
    p = random_probs(rng, 13, 6)
    y = rng.integers(0, 6, 13)
    assert node_loss(p, y).item() == pytest.approx(node_loss_loop(p, y), abs=1e-12)


def test_node_loss_rejects_unlabeled():
    with pytest.raises(ContractError):
        node_loss(torch.full((2, 3), 1 / 3, dtype=torch.float64), torch.tensor([0, -1]))


def test_edge_loss_anchors():
    one = edge_loss(f64([[1.0, 1 - 1e-7], [1 - 1e-7, 1.0]]), torch.ones(2, 2))
    assert one.item() == pytest.approx(1e-7, rel=1e-3)
    half = edge_loss(torch.full((3, 3), 0.5, dtype=torch.float64), torch.eye(3))
    assert half.item() == pytest.approx(math.log(2), abs=1e-12)


def test_edge_loss_matches_loop_with_mask(rng):
    m = rng.random((8, 8))
    a = f64((m + m.T) / 2)
    labels = rng.integers(0, 3, 8)
    prov = np.array([0, 0, 1, -1, 0, 1, -1, 0])
    gt, mask = build_gt_edges(labels, prov)
    assert edge_loss(a, gt, mask).item() == pytest.approx(edge_loss_loop(a, gt.numpy(), mask.numpy()), abs=1e-12)


def test_edge_loss_clamps_and_warns(caplog):
    objectives._clamp_warned = False
    a = f64([[1.0, 0.0], [0.0, 1.0]])
    with caplog.at_level(logging.WARNING, logger="higda.objectives"):
        v = edge_loss(a, torch.ones(2, 2))
    assert math.isfinite(v.item())
    assert v.item() == pytest.approx(-math.log(1e-7), rel=1e-9)
    assert "clamped" in caplog.text


def test_entropy_anchors(rng):
    assert entropy_loss(torch.full((3, 10), 0.1, dtype=torch.float64)).item() == pytest.approx(math.log(10), abs=1e-12)
    assert entropy_loss(torch.eye(4, dtype=torch.float64)).item() == 0.0
    p = random_probs(rng, 9, 5)
    assert entropy_loss(p).item() == pytest.approx(entropy_loop(p), abs=1e-12)


def _batch(model, rng, n=6):
    x = f64(random_images(rng, n))
    labels = rng.integers(0, 5, n)
    prov = np.zeros(n, dtype=np.int64)
    edges, mask = build_gt_edges(labels, prov)
    return x, labels, edges, mask


def test_higda_loss_is_sum_of_parts(tiny_model, rng):
    x, labels, edges, mask = _batch(tiny_model, rng)
    out = tiny_model(x)
    total, report = higda_loss(out, labels, edges, mask)
    assert report.total == pytest.approx(report.node_loss + report.edge_loss, abs=1e-12)
    assert total.item() == pytest.approx(node_loss(out.probs, labels).item() + edge_loss(out.affinity, edges, mask).item(), abs=1e-12)


def test_higda_gradient_is_sum_of_part_gradients(tiny_model, rng):
    x, labels, edges, mask = _batch(tiny_model, rng)
    state = ModelState(tiny_model)
    g_tot = state.grads_of(higda_loss(tiny_model(x), labels, edges, mask)[0])
    g_n = state.grads_of(node_loss(tiny_model(x).probs, labels))
    g_e = state.grads_of(edge_loss(tiny_model(x).affinity, edges, mask))
    for n in g_tot:
        np.testing.assert_allclose(g_tot[n].numpy(), (g_n[n] + g_e[n]).numpy(), atol=1e-12)
    err = finite_diff_check(lambda: edge_loss(tiny_model(x).affinity, edges, mask), state, max_entries=60)
    assert err < 1e-4
    err = finite_diff_check(lambda: node_loss(tiny_model(x).probs, labels), state, max_entries=60)
    assert err < 1e-4


def test_perfect_predictions_zero_total():
    class Out:
        probs = torch.eye(3, dtype=torch.float64)[[0, 1, 1]]
        affinity = f64([[1, 1e-9, 1e-9], [1e-9, 1, 1], [1e-9, 1, 1]])
    edges, mask = build_gt_edges([0, 1, 1], [0, 0, 0])
    _, report = higda_loss(Out, [0, 1, 1], edges, mask)
    assert report.total < 1e-6


def test_minimax_signs():
    groups = {"a": "log", "b": "gog"}
    g = {"a": torch.tensor([2.0]), "b": torch.tensor([2.0])}
    out = minimax_apply(g, MinimaxConfig(lam=0.1, method="mme"), groups)
    assert out["a"].item() == pytest.approx(0.2) and out["b"].item() == pytest.approx(-0.2)
    zero = minimax_apply(g, MinimaxConfig(lam=0.0, method="mme"), groups)
    assert all(v.abs().max().item() == 0 for v in zero.values())
    flipped = minimax_apply(g, MinimaxConfig(lam=0.1, method="mme"), {"a": "gog", "b": "log"})
    assert torch.equal(flipped["a"], -out["a"]) and torch.equal(flipped["b"], -out["b"])
    with pytest.raises(ContractError):
        minimax_apply(g, MinimaxConfig(), {"a": "log"})


def test_minimax_step_descends_entropy_for_backbone(tiny_model, rng):
    x = f64(random_images(rng, 8))
    state = ModelState(tiny_model, tiny_model.parameter_groups())
    cfg = MinimaxConfig(lam=0.1, method="mme")
    h0 = entropy_loss(tiny_model(x).probs)
    signed = minimax_apply(state.grads_of(h0), cfg, state.groups)
    with torch.no_grad():
        for n, p in state.params.items():
            if state.groups[n] == "log":
                p -= 1e-3 * signed[n]
    assert entropy_loss(tiny_model(x).probs).item() < h0.item()


def test_adversarial_plugin_slot(tiny_model, rng):
    register_adversarial_loss("mean-prob", lambda out: out.probs[:, 0].mean())
    out = tiny_model(f64(random_images(rng, 3)))
    term = adversarial_term(MinimaxConfig(method="plugin", plugin="mean-prob"), out)
    assert term.item() == pytest.approx(out.probs[:, 0].mean().item())
    assert adversarial_term(MinimaxConfig(), out) is None
    with pytest.raises(ContractError):
        adversarial_term(MinimaxConfig(method="plugin", plugin="missing"), out)
    with pytest.raises(ValueError):
        MinimaxConfig(lam=-1)


def test_loss_log(tmp_path):
    with LossLog(tmp_path / "m.csv") as log:
        log.write(1, LossReport(0.5, 0.25, 0.75))
        log.write(2, LossReport(0.5, 0.25, 0.75, entropy=1.0))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["step,node_loss,edge_loss,entropy,total", "1,0.5,0.25,,0.75", "2,0.5,0.25,1.0,0.75"]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 7), st.integers(0, 10_000))
def test_node_loss_nonnegative(n, c, seed):
    r = np.random.default_rng(seed)
    p = random_probs(r, n, c)
    assert node_loss(p, r.integers(0, c, n)).item() >= 0
    assert 0 <= entropy_loss(p).item() <= math.log(c) + 1e-12
