import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import perturb, small_params
from lipsumlab import model as M
from lipsumlab.data import energy_token_pool
from lipsumlab.finetune import (
    DEFAULT_LAMBDA,
    FinetuneConfig,
    Method,
    context_head,
    ema_update,
    finetune,
    init_head,
    linear_probe,
    lr_schedule,
    reg_carft,
    reg_featkd,
    reg_kd,
    reg_l2sp,
    reg_lipsum,
)
from lipsumlab.numerics import kld_tempered
from lipsumlab.pretrain import RunError

SMALL_FT = FinetuneConfig(steps=40, batch=16, lr=1e-2, eval_every=10, num_tokens=6, token_len=3, ctx_tokens=4)


# --- schedule ----------------------------------------------------------------


def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 1e-3, 0.1) == 0.0
    assert lr_schedule(10, 100, 1e-3, 0.1) == pytest.approx(1e-3)
    assert lr_schedule(100, 100, 1e-3, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert lr_schedule(5, 100, 1e-3, 0.1) == pytest.approx(5e-4)
    assert lr_schedule(55, 100, 1e-3, 0.1) == pytest.approx(0.5e-3)


def test_lr_schedule_ceil_warmup():
    # ceil(0.1 * 15) = 2 warm-up steps
    assert lr_schedule(1, 15, 1.0, 0.1) == pytest.approx(0.5)
    assert lr_schedule(2, 15, 1.0, 0.1) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.floats(0, 0.99), st.data())
def test_lr_schedule_bounded(total, warmup, data):
    s = data.draw(st.integers(0, total))
    assert 0.0 <= lr_schedule(s, total, 2.0, warmup) <= 2.0 + 1e-12


def test_ema_examples():
    one = {"a": np.ones(3)}
    zero = {"a": np.zeros(3)}
    np.testing.assert_array_equal(ema_update(one, zero, 1.0)["a"], np.ones(3))
    np.testing.assert_allclose(ema_update(one, zero, 0.9)["a"], 0.9)
    with pytest.raises(ValueError):
        ema_update(one, zero, 1.5)
    assert DEFAULT_LAMBDA["L2SP"] == 3e-4 and DEFAULT_LAMBDA["KD"] == 0.1 and DEFAULT_LAMBDA["CARFT"] == 1.0
    assert FinetuneConfig().ema_decay == 0.9995
    assert (FinetuneConfig().num_tokens, FinetuneConfig().token_len) == (80, 8)


# --- regularisers ------------------------------------------------------------


def test_l2sp_examples():
    ref = M.ParamSet({"head.W": np.zeros((1, 2))})
    assert reg_l2sp(ref, ref) == 0.0
    assert reg_l2sp(M.ParamSet({"head.W": np.array([[3.0, 4.0]])}), ref) == pytest.approx(12.5)
    with pytest.raises(ValueError):
        reg_l2sp(M.ParamSet({"head.W": np.zeros((2, 2))}), ref)


def test_kd_uniform_teacher_is_log_k():
    params, _, rng = small_params(0)
    params[M.HEAD_KEY] = np.zeros_like(params[M.HEAD_KEY])
    assert reg_kd(params, params, rng.standard_normal((5, 5))) == pytest.approx(math.log(4), abs=1e-14)


def test_kd_at_least_teacher_entropy():
    params, _, rng = small_params(1)
    for _ in range(10):
        x = rng.standard_normal((5, 5))
        student = perturb(params, rng)
        u0 = M.predict_logits(params, x)
        entropy = float(np.mean(kld_tempered(u0, u0, 1.0)))
        assert reg_kd(student, params, x) >= entropy - 1e-12
        assert reg_kd(params, params, x) == pytest.approx(entropy, rel=1e-14)


def test_carft_zero_at_reference():
    params, phi, rng = small_params(2)
    w_ctx = context_head(phi, 4, num_ctx=5, length=3)
    x = rng.standard_normal((5, 5))
    v0 = M.vision_forward(params, x) @ w_ctx.T
    entropy = float(np.mean(kld_tempered(v0, v0, 1.0)))
    assert reg_carft(params, params, w_ctx, x) - entropy == pytest.approx(0.0, abs=1e-13)
    assert reg_carft(params, params, w_ctx, x, variant="MSE") == 0.0


def test_context_head_disjoint_from_class_texts():
    _, phi, _ = small_params(2)
    w_ctx = context_head(phi, 4, num_ctx=5, length=3)
    from lipsumlab.data import class_texts

    np.testing.assert_array_equal(w_ctx, M.zero_shot_head(phi, class_texts(5, 3, 16, offset=4)))


def _unit_text(dim=4):
    # every token sequence maps to e_1
    bp = np.zeros(dim)
    bp[0] = 1.0
    return M.ParamSet({"text.Emb": np.zeros((16, 3)), "text.Wp": np.zeros((dim, 3)), "text.bp": bp})


def test_lipsum_zero_and_unit_shift():
    params, phi, rng = small_params(3)
    x = rng.standard_normal((5, 5))
    assert reg_lipsum(params, params, phi, x, rng, num_tokens=8, length=3) == 0.0
    shifted = params.copy()
    shifted["vision.b2"] = shifted["vision.b2"] + np.array([1.0, 0, 0, 0])
    for m in (1, 5, 80):
        assert reg_lipsum(shifted, params, _unit_text(), x, rng, num_tokens=m, length=3) == pytest.approx(0.5)


def test_lipsum_resamples_tokens_each_call():
    params, phi, rng = small_params(4)
    other = perturb(params, rng)
    x = rng.standard_normal((5, 5))
    a = reg_lipsum(other, params, phi, x, rng, num_tokens=4, length=3)
    b = reg_lipsum(other, params, phi, x, rng, num_tokens=4, length=3)
    assert a != b
    with pytest.raises(ValueError):
        reg_lipsum(other, params, phi, x)


def test_featkd_examples():
    params, phi, rng = small_params(5)
    x = rng.standard_normal((5, 5))
    assert reg_featkd(params, params, x) == 0.0
    shifted = params.copy()
    shifted["vision.b2"] = shifted["vision.b2"] + np.array([0, 1.0, 0, 0])
    assert reg_featkd(shifted, params, x) == pytest.approx(1.0)
    # only the head changes: features equal, so logit matching is also zero
    head_only = params.copy()
    head_only[M.HEAD_KEY] = head_only[M.HEAD_KEY] + 1.0
    assert reg_featkd(head_only, params, x) == 0.0
    assert reg_lipsum(head_only, params, phi, x, rng, num_tokens=6, length=3) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_regularisers_nonnegative(seed):
    params, phi, rng = small_params(seed)
    other = perturb(params, rng)
    x = rng.standard_normal((4, 5))
    w_ctx = context_head(phi, 4, num_ctx=5, length=3)
    toks = rng.integers(0, 16, (6, 3))
    v0_ctx = M.vision_forward(params, x) @ w_ctx.T
    v0_lip = M.vision_forward(params, x) @ M.text_forward(phi, toks).T
    u0 = M.predict_logits(params, x)
    ent = lambda v: float(np.mean(kld_tempered(v, v, 1.0)))
    assert reg_l2sp(other, params) >= 0
    assert reg_featkd(other, params, x) >= 0
    assert reg_kd(other, params, x) - ent(u0) >= -1e-12
    assert reg_carft(other, params, w_ctx, x) - ent(v0_ctx) >= -1e-12
    assert reg_carft(other, params, w_ctx, x, variant="MSE") >= 0
    assert reg_lipsum(other, params, phi, x, tokens=toks) >= 0
    assert reg_lipsum(other, params, phi, x, tokens=toks, variant="KLD") - ent(v0_lip) >= -1e-12


# --- heads -------------------------------------------------------------------


def test_init_head_strategies(small_pretrained):
    bench, res = small_pretrained
    texts = bench.class_texts
    zero = init_head("zero", res.text, texts, bench.train, res.vision)
    assert np.all(zero == 0)
    u = M.logits(zero, res.vision, bench.val.x)
    assert np.all(u == 0)
    zs = init_head("zero_shot", res.text, texts, bench.train, res.vision)
    for k in range(len(texts)):
        np.testing.assert_array_equal(zs[k], M.text_forward(res.text, texts[k]))
    with pytest.raises(ValueError):
        init_head("bogus", res.text, texts, bench.train, res.vision)


def test_linear_probe_frozen_and_lr_zero(small_pretrained):
    bench, res = small_pretrained
    theta0 = res.vision.copy()
    w_init = np.ones((4, 4))
    W = linear_probe(res.vision, bench.train, 4, steps=5, lr=0.0, w_init=w_init)
    np.testing.assert_array_equal(W, w_init)
    linear_probe(res.vision, bench.train, 4, steps=20, lr=0.1)
    assert res.vision.bitwise_equal(theta0)


def test_linear_probe_separable_toy():
    from lipsumlab.data import Dataset

    rng = np.random.default_rng(0)
    centers = 4.0 * np.eye(3, 5)
    y = np.repeat(np.arange(3), 30)
    x = centers[y] + 0.3 * rng.standard_normal((90, 5))
    theta = M.ParamSet({"vision.W1": np.eye(5), "vision.b1": np.zeros(5), "vision.W2": np.eye(5), "vision.b2": np.zeros(5)})
    W = linear_probe(theta, Dataset(x, y, np.zeros(90, dtype=np.int64)), 3, steps=200, lr=0.1)
    assert np.mean(np.argmax(x @ W.T, axis=1) == y) >= 0.9


# --- training loop -----------------------------------------------------------


def test_unknown_method():
    with pytest.raises(ValueError):
        Method("NOPE")
    assert Method.parse("EMA") == Method("FT", True)
    assert Method.parse("LIPSUM+EMA") == Method("LIPSUM", True)
    assert Method("LIPSUM", True).label == "LIPSUM+EMA"


def test_invalid_config_rejected(small_pretrained):
    bench, res = small_pretrained
    for bad in (dict(steps=0), dict(warmup=1.0), dict(lam=-1.0), dict(ema_decay=2.0)):
        with pytest.raises(ValueError):
            finetune(res.vision, res.text, bench, replace(SMALL_FT, **bad))


def test_single_step_with_full_warmup_is_a_no_op(small_pretrained):
    bench, res = small_pretrained
    tm = finetune(res.vision, res.text, bench, replace(SMALL_FT, steps=1, warmup=0.99))
    assert tm.params.bitwise_equal(tm.zero_shot_ref)
    assert tm.trace[0]["lr"] == 0.0 and tm.selected_step == 1


def test_ft_ignores_lambda(small_pretrained):
    bench, res = small_pretrained
    a = finetune(res.vision, res.text, bench, replace(SMALL_FT, lam=0.0))
    b = finetune(res.vision, res.text, bench, replace(SMALL_FT, lam=123.0))
    assert a.trace == b.trace and a.params.bitwise_equal(b.params)


def test_inputs_untouched(small_pretrained):
    bench, res = small_pretrained
    phi, theta, x = res.text.copy(), res.vision.copy(), bench.train.x.copy()
    finetune(res.vision, res.text, bench, replace(SMALL_FT, method=Method("LIPSUM")))
    assert res.text.bitwise_equal(phi) and res.vision.bitwise_equal(theta)
    assert np.array_equal(bench.train.x, x)


def test_token_stream_determinism(small_pretrained):
    bench, res = small_pretrained
    cfg = replace(SMALL_FT, method=Method("LIPSUM"))
    a = finetune(res.vision, res.text, bench, cfg)
    b = finetune(res.vision, res.text, bench, cfg)
    c = finetune(res.vision, res.text, bench, replace(cfg, token_seed=99))
    assert a.trace == b.trace
    assert [r["loss_reg"] for r in a.trace] != [r["loss_reg"] for r in c.trace]


def test_model_selection_is_earliest_argmax(small_pretrained):
    bench, res = small_pretrained
    for variant in ("FT", "LIPSUM", "ScratchFT"):
        tm = finetune(res.vision, res.text, bench, replace(SMALL_FT, method=Method(variant)))
        evals = [(r["step"], r["val_acc"]) for r in tm.trace if r["val_acc"] is not None]
        assert [s for s, _ in evals] == [10, 20, 30, 40]
        best = max(a for _, a in evals)
        assert tm.selected_step == min(s for s, a in evals if a == best)
        acc = np.mean(np.argmax(M.predict_logits(tm.params, bench.val.x), axis=1) == bench.val.label)
        assert acc == best


def test_ema_with_unit_decay_stays_at_start(small_pretrained):
    bench, res = small_pretrained
    tm = finetune(res.vision, res.text, bench, replace(SMALL_FT, method=Method("FT", True), ema_decay=1.0))
    assert tm.params.bitwise_equal(tm.zero_shot_ref)


def test_ema_lags_plain_ft(small_pretrained):
    bench, res = small_pretrained
    cfg = replace(SMALL_FT, eval_every=40)
    ft = finetune(res.vision, res.text, bench, cfg)
    ema = finetune(res.vision, res.text, bench, replace(cfg, method=Method("FT", True), ema_decay=0.9))
    ref = ft.zero_shot_ref
    assert 0 < (ema.params - ref).norm() < (ft.params - ref).norm()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_run_error(small_pretrained):
    bench, res = small_pretrained
    with pytest.raises(RunError) as info:
        finetune(res.vision, res.text, bench, replace(SMALL_FT, lr=1e200, warmup=0.0))
    assert info.value.step is not None


def _logit_shift(tm, phi, bench, pool):
    g = M.text_forward(phi, pool)
    d = (M.vision_forward(tm.params, bench.test.x) - M.vision_forward(tm.zero_shot_ref, bench.test.x)) @ g.T
    return float(np.mean(np.linalg.norm(d, axis=1)))


def test_strong_lipsum_keeps_text_logits(default_seeds):
    ratios = []
    for bench, res in default_seeds:
        pool = energy_token_pool(bench.spec.seed, 500)
        cfg = FinetuneConfig(seed=bench.spec.seed)
        ft = finetune(res.vision, res.text, bench, cfg)
        lip = finetune(res.vision, res.text, bench, replace(cfg, method=Method("LIPSUM"), lam=1e4))
        ratios.append(_logit_shift(ft, res.text, bench, pool) / _logit_shift(lip, res.text, bench, pool))
    assert np.median(ratios) >= 10.0


def test_linear_probe_between_chance_and_ft(default_seeds):
    probe, full = [], []
    for bench, res in default_seeds:
        W = linear_probe(res.vision, bench.train, bench.spec.num_classes)
        probe.append(np.mean(np.argmax(M.logits(W, res.vision, bench.test.x), axis=1) == bench.test.label))
        ft = finetune(res.vision, res.text, bench, FinetuneConfig(seed=bench.spec.seed))
        full.append(np.mean(np.argmax(M.predict_logits(ft.params, bench.test.x), axis=1) == bench.test.label))
    assert 1.0 / default_seeds[0][0].spec.num_classes < np.median(probe) < np.median(full)
