import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import SMALL_SPEC, small_params
from lipsumlab import model as M
from lipsumlab.pretrain import (
    PretrainConfig,
    RunError,
    contrastive_pretrain,
    info_nce_loss,
    init_params,
)

SMALL_CFG = PretrainConfig(steps=30, batch=4, lr=0.05, hidden=6, dim=4, embed_dim=3)


def _zero_features(theta, phi):
    theta = theta.copy()
    theta["vision.W2"][:] = 0
    theta["vision.b2"][:] = 0
    return theta


@pytest.mark.parametrize("b", [2, 3, 6])
def test_zero_features_give_log_batch(b):
    params, phi, rng = small_params(0)
    theta = _zero_features(params.subset(M.VISION_KEYS), phi)
    loss = info_nce_loss(theta, phi, rng.standard_normal((b, 5)), rng.integers(0, 16, (b, 3)))
    assert loss == pytest.approx(math.log(b), abs=1e-14)


def test_two_sided_oracle():
    params, phi, rng = small_params(1)
    for _ in range(10):
        x, toks = rng.standard_normal((5, 5)), rng.integers(0, 16, (5, 3))
        f, g = M.vision_forward(params, x), M.text_forward(phi, toks)
        s = f @ g.T / 0.5
        rows = [-(s[i, i] - math.log(sum(math.exp(v) for v in s[i]))) for i in range(5)]
        cols = [-(s[j, j] - math.log(sum(math.exp(s[i, j]) for i in range(5)))) for j in range(5)]
        expected = 0.5 * sum(rows) / 5 + 0.5 * sum(cols) / 5
        assert info_nce_loss(params, phi, x, toks, 0.5) == pytest.approx(expected, rel=1e-12)
        assert expected >= 0


def test_diagonal_dominance_drives_loss_to_zero():
    # identity encoders: S = c * I for one-hot inputs and one-token texts
    b = 4
    theta = M.ParamSet({"vision.W1": np.eye(b), "vision.b1": np.zeros(b), "vision.W2": np.eye(b), "vision.b2": np.zeros(b)})
    losses = []
    for c in (1.0, 5.0, 20.0):
        phi = M.ParamSet({"text.Emb": c * np.eye(b), "text.Wp": np.eye(b), "text.bp": np.zeros(b)})
        losses.append(info_nce_loss(theta, phi, np.eye(b), np.arange(b)[:, None], 0.5))
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-12


def test_batch_of_one_rejected():
    params, phi, rng = small_params(2)
    with pytest.raises(ValueError):
        info_nce_loss(params, phi, rng.standard_normal((1, 5)), [[1, 2, 3]])


def test_zero_steps_returns_initialisation(small_bench):
    res = contrastive_pretrain(small_bench, replace(SMALL_CFG, steps=0))
    theta, phi = init_params(small_bench, SMALL_CFG)
    assert res.vision.bitwise_equal(theta) and res.text.bitwise_equal(phi)
    assert res.trace == []


def test_zero_lr_leaves_params_unchanged(small_bench):
    res = contrastive_pretrain(small_bench, replace(SMALL_CFG, lr=0.0))
    theta, phi = init_params(small_bench, SMALL_CFG)
    assert res.vision.bitwise_equal(theta) and res.text.bitwise_equal(phi)
    assert len(res.trace) == SMALL_CFG.steps


def test_deterministic_and_data_untouched(small_bench):
    before = small_bench.pretrain.x.copy()
    a = contrastive_pretrain(small_bench, SMALL_CFG)
    b = contrastive_pretrain(small_bench, SMALL_CFG)
    assert a.vision.bitwise_equal(b.vision) and a.text.bitwise_equal(b.text) and a.trace == b.trace
    assert np.array_equal(small_bench.pretrain.x, before)
    assert small_bench.spec == SMALL_SPEC


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(small_bench):
    with pytest.raises(RunError) as info:
        contrastive_pretrain(small_bench, replace(SMALL_CFG, lr=1e8, steps=200))
    assert info.value.step is not None


def test_invalid_configs(small_bench):
    with pytest.raises(ValueError):
        contrastive_pretrain(small_bench, replace(SMALL_CFG, temperature=0.0))
    with pytest.raises(ValueError):
        contrastive_pretrain(small_bench, replace(SMALL_CFG, batch=SMALL_SPEC.num_classes + 1))


def test_default_pretraining_learns(default_pretrained):
    bench, res = default_pretrained
    k = bench.spec.num_classes
    early, late = np.mean(res.trace[:50]), np.mean(res.trace[-200:])
    assert late < 0.5 * early
    W = M.zero_shot_head(res.text, bench.class_texts)
    acc = float(np.mean(np.argmax(M.logits(W, res.vision, bench.test.x), axis=1) == bench.test.label))
    assert acc >= 0.8 and acc > 5.0 / k


def test_default_pretraining_median_over_seeds(default_seeds):
    accs, ratios = [], []
    for bench, res in default_seeds:
        W = M.zero_shot_head(res.text, bench.class_texts)
        accs.append(np.mean(np.argmax(M.logits(W, res.vision, bench.test.x), axis=1) == bench.test.label))
        ratios.append(np.mean(res.trace[-200:]) / np.mean(res.trace[:50]))
    assert np.median(accs) >= 0.8
    assert np.median(ratios) < 0.5
