"""Fine-tuning engine: head initialisation, the cross-entropy update, the
regularisers toward the zero-shot model, EMA, the LR schedule and
reference-validation model selection.

Every regulariser takes ``with_grad``; when set it returns
``(value, grads)`` where ``grads`` maps parameter names to arrays (only
the names the term depends on are present).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np

from . import model as M
from .data import Benchmark, Dataset, class_texts, sample_random_tokens, stream
from .numerics import Adam, kld_tempered, kld_tempered_grad, log_softmax, softmax
from .pretrain import RunError

VARIANTS = ("FT", "ScratchFT", "LPFT", "L2SP", "KD", "CARFT", "CARFT_MSE", "LIPSUM", "LIPSUM_KLD", "FEATKD")

DEFAULT_LAMBDA = {
    "L2SP": 3e-4,
    "KD": 0.1,
    "CARFT": 1.0,
    "CARFT_MSE": 1.0,
    "LIPSUM": 1.0,
    "LIPSUM_KLD": 1.0,
    "FEATKD": 1.0,
}

HEAD_STRATEGY = {"ScratchFT": "zero", "LPFT": "linear_probe"}


@dataclass(frozen=True)
class Method:
    variant: str = "FT"
    ema: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown method variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def label(self) -> str:
        if self.ema:
            return "EMA" if self.variant == "FT" else f"{self.variant}+EMA"
        return self.variant

    @classmethod
    def parse(cls, name: str) -> "Method":
        """``"EMA"`` is shorthand for FT with EMA; ``"X+EMA"`` adds EMA to X."""
        if name == "EMA":
            return cls("FT", True)
        if name.endswith("+EMA"):
            return cls(name[: -len("+EMA")], True)
        return cls(name, False)


@dataclass(frozen=True)
class FinetuneConfig:
    method: Method = field(default_factory=Method)
    steps: int = 500
    batch: int = 64
    lr: float = 1e-3
    warmup: float = 0.1
    eval_every: int = 50
    lam: float | None = None
    tau: float = 1.0
    ema_decay: float = 0.9995
    num_tokens: int = 80
    token_len: int = 8
    ctx_tokens: int = 16
    probe_steps: int = 200
    probe_lr: float = 0.1
    seed: int = 0
    token_seed: int | None = None

    @property
    def coef(self) -> float:
        if self.lam is not None:
            return self.lam
        return DEFAULT_LAMBDA.get(self.method.variant, 0.0)

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.coef < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.batch < 1 or self.eval_every < 1 or self.num_tokens < 1 or self.token_len < 1:
            raise ValueError("batch, eval_every, num_tokens and token_len must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.label
        return d


@dataclass
class TrainedModel:
    params: M.ParamSet
    zero_shot_ref: M.ParamSet
    method: Method
    config: FinetuneConfig
    selected_step: int
    trace: list[dict] = field(default_factory=list)


# --- schedule and parameter averaging -------------------------------------


def lr_schedule(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warm-up over ``ceil(warmup * total)`` steps, then cosine decay to 0 at ``total``."""
    w = math.ceil(warmup * total)
    if step < w:
        return peak * step / w
    if step >= total:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def ema_update(ema: Mapping[str, np.ndarray], current: Mapping[str, np.ndarray], decay: float) -> M.ParamSet:
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    return M.ParamSet({k: decay * ema[k] + (1.0 - decay) * current[k] for k in ema})


# --- losses ------------------------------------------------------------------


def ce_loss(params: Mapping[str, np.ndarray], x, y, with_grad: bool = False):
    """Batch-mean cross-entropy of the classifier ``head.W @ F(x)``."""
    feats, cache = M.vision_forward_cache(params, x)
    W = params[M.HEAD_KEY]
    u = M.rowdot(feats, W)
    y = np.asarray(y)
    n = len(y)
    lsm = log_softmax(u)
    value = float(-lsm[np.arange(n), y].mean())
    if not with_grad:
        return value
    du = softmax(u)
    du[np.arange(n), y] -= 1.0
    du /= n
    grads = M.vision_backward(params, cache, du @ W)
    grads[M.HEAD_KEY] = du.T @ feats
    return value, grads


def reg_l2sp(params: Mapping[str, np.ndarray], ref: Mapping[str, np.ndarray], with_grad: bool = False):
    """Half squared L2 distance to the starting point over the vision layers and head."""
    keys = [k for k in (*M.VISION_KEYS, M.HEAD_KEY) if k in params]
    for k in keys:
        if k not in ref or np.shape(ref[k]) != np.shape(params[k]):
            raise ValueError(f"structure mismatch at {k}")
    diff = {k: params[k] - ref[k] for k in keys}
    value = 0.5 * float(sum(np.sum(d * d) for d in diff.values()))
    return (value, diff) if with_grad else value


def reg_kd(params, ref, x, with_grad: bool = False):
    """Distillation toward the zero-shot classifier's softmax output (batch mean)."""
    feats, cache = M.vision_forward_cache(params, x)
    W = params[M.HEAD_KEY]
    u = np.atleast_2d(M.rowdot(feats, W))
    u0 = np.atleast_2d(M.logits(ref[M.HEAD_KEY], ref, x))
    if u.shape != u0.shape:
        raise ValueError("student and teacher heads differ in class count")
    n = u.shape[0]
    value = float(np.mean(kld_tempered(u, u0, 1.0)))
    if not with_grad:
        return value
    du = kld_tempered_grad(u, u0, 1.0) / n
    grads = M.vision_backward(params, cache, du @ W)
    grads[M.HEAD_KEY] = du.T @ np.atleast_2d(feats)
    return value, grads


def _guided(theta, theta0, guide: np.ndarray, x, loss: str, tau: float, with_grad: bool):
    """Shared body of logit-matching terms over text features ``guide`` (``[M, D]``)."""
    feats, cache = M.vision_forward_cache(theta, x)
    feats = np.atleast_2d(feats)
    feats0 = np.atleast_2d(M.vision_forward(theta0, x))
    v = M.rowdot(feats, guide)
    v0 = M.rowdot(feats0, guide)
    n, m = v.shape
    if loss == "MSE":
        value = float(np.mean(np.sum((v - v0) ** 2, axis=1) / (2.0 * m)))
        dv = (v - v0) / (m * n)
    elif loss == "KLD":
        value = float(np.mean(kld_tempered(v, v0, tau)))
        dv = kld_tempered_grad(v, v0, tau) / n
    else:
        raise ValueError(f"unknown loss variant {loss!r}")
    if not with_grad:
        return value
    return value, M.vision_backward(theta, cache, dv @ guide)


def context_head(phi, num_classes: int, num_ctx: int = 16, length: int = 8) -> np.ndarray:
    """Fixed guidance features from ``num_ctx`` deterministic sequences disjoint from the class texts."""
    vocab = phi["text.Emb"].shape[0]
    return M.zero_shot_head(phi, class_texts(num_ctx, length, vocab, offset=num_classes))


def reg_carft(theta, theta0, w_ctx: np.ndarray, x, tau: float = 1.0, variant: str = "KLD", with_grad: bool = False):
    """Context-head matching: KLD form, or ``mse_half`` of the two context-logit vectors."""
    return _guided(theta, theta0, np.asarray(w_ctx), x, variant, tau, with_grad)


def reg_lipsum(
    theta,
    theta0,
    phi,
    x,
    rng: np.random.Generator | None = None,
    num_tokens: int = 80,
    length: int = 8,
    variant: str = "MSE",
    tau: float = 1.0,
    tokens: np.ndarray | None = None,
    with_grad: bool = False,
):
    """Random-text logit matching. Draws ``num_tokens`` fresh sequences from ``rng`` unless ``tokens`` is given."""
    if tokens is None:
        if rng is None:
            raise ValueError("need an rng or explicit tokens")
        tokens = sample_random_tokens(num_tokens, rng, length, phi["text.Emb"].shape[0])
    guide = M.text_forward(phi, tokens)
    return _guided(theta, theta0, guide, x, variant, tau, with_grad)


def reg_featkd(theta, theta0, x, with_grad: bool = False):
    """Batch mean of ``||F_theta(x) - F_theta0(x)||^2``."""
    feats, cache = M.vision_forward_cache(theta, x)
    feats = np.atleast_2d(feats)
    diff = feats - np.atleast_2d(M.vision_forward(theta0, x))
    n = diff.shape[0]
    value = float(np.mean(np.sum(diff**2, axis=1)))
    if not with_grad:
        return value
    return value, M.vision_backward(theta, cache, 2.0 * diff / n)


# --- head initialisation -----------------------------------------------------


def linear_probe(theta0, train: Dataset, num_classes: int, steps: int = 200, lr: float = 0.1, w_init=None) -> np.ndarray:
    """Full-batch gradient descent on cross-entropy over the head only; ``theta0`` is read, never written."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    feats = M.vision_forward(theta0, train.x)
    W = np.zeros((num_classes, feats.shape[1])) if w_init is None else np.array(w_init, dtype=np.float64)
    n = len(train.label)
    rows = np.arange(n)
    for step in range(steps):
        u = M.rowdot(feats, W)
        du = softmax(u)
        du[rows, train.label] -= 1.0
        W = W - lr * (du.T @ feats) / n
        if not np.all(np.isfinite(W)):
            raise RunError("linear probe diverged", step)
    return W


def init_head(strategy: str, phi, texts, train: Dataset, theta0, probe_steps: int = 200, probe_lr: float = 0.1) -> np.ndarray:
    if strategy == "zero":
        return np.zeros((len(texts), phi["text.Wp"].shape[0]))
    if strategy == "zero_shot":
        return M.zero_shot_head(phi, texts)
    if strategy == "linear_probe":
        return linear_probe(theta0, train, len(texts), probe_steps, probe_lr)
    raise ValueError(f"unknown head strategy {strategy!r}")


# --- training loop -----------------------------------------------------------


def _accuracy(params, ds: Dataset) -> float:
    pred = np.argmax(M.predict_logits(params, ds.x), axis=1)
    return float(np.mean(pred == ds.label))


def total_loss(params, ref, phi, x, y, config: FinetuneConfig, w_ctx=None, tokens=None, with_grad: bool = False):
    """Cross-entropy plus the method's weighted regulariser; returns ``(ce, reg[, grads])``."""
    variant = config.method.variant
    lam = config.coef
    ce = ce_loss(params, x, y, with_grad)
    ce_val, grads = ce if with_grad else (ce, None)
    if variant == "L2SP":
        reg = reg_l2sp(params, ref, with_grad)
    elif variant == "KD":
        reg = reg_kd(params, ref, x, with_grad)
    elif variant in ("CARFT", "CARFT_MSE"):
        reg = reg_carft(params, ref, w_ctx, x, config.tau, "MSE" if variant == "CARFT_MSE" else "KLD", with_grad)
    elif variant in ("LIPSUM", "LIPSUM_KLD"):
        reg = reg_lipsum(
            params, ref, phi, x, tokens=tokens, variant="KLD" if variant == "LIPSUM_KLD" else "MSE",
            tau=config.tau, with_grad=with_grad,
        )
    elif variant == "FEATKD":
        reg = reg_featkd(params, ref, x, with_grad)
    else:
        reg = (0.0, {}) if with_grad else 0.0
    if not with_grad:
        return ce_val, reg
    reg_val, reg_grads = reg
    for k, g in reg_grads.items():
        grads[k] = grads[k] + lam * g
    return ce_val, reg_val, grads


def finetune(vision0: M.ParamSet, phi: M.ParamSet, bench: Benchmark, config: FinetuneConfig) -> TrainedModel:
    """Adam on (theta, W) with phi frozen; returns the best reference-validation checkpoint."""
    config.validate()
    variant = config.method.variant
    texts = bench.class_texts
    w0 = M.zero_shot_head(phi, texts)
    ref = M.ParamSet({**vision0.subset(M.VISION_KEYS), M.HEAD_KEY: w0})
    head = init_head(
        HEAD_STRATEGY.get(variant, "zero_shot"), phi, texts, bench.train, vision0, config.probe_steps, config.probe_lr
    )
    params = M.ParamSet({**ref.copy(), M.HEAD_KEY: head})
    ema = params.copy() if config.method.ema else None
    w_ctx = context_head(phi, len(texts), config.ctx_tokens, config.token_len) if variant.startswith("CARFT") else None

    opt = Adam({k: v.shape for k, v in params.items()})
    batch_rng = stream(config.seed, "finetune_batches")
    token_seed = config.seed if config.token_seed is None else config.token_seed
    token_rng = stream(token_seed, "lipsum_tokens")
    n = len(bench.train)
    bsz = min(config.batch, n)
    vocab = phi["text.Emb"].shape[0]

    best_acc, best_step, best_params = -1.0, 0, params.copy()
    trace = []
    for t in range(1, config.steps + 1):
        lr = lr_schedule(t - 1, config.steps, config.lr, config.warmup)
        idx = batch_rng.choice(n, size=bsz, replace=False)
        x, y = bench.train.x[idx], bench.train.label[idx]
        tokens = None
        if variant.startswith("LIPSUM"):
            tokens = sample_random_tokens(config.num_tokens, token_rng, config.token_len, vocab)
        ce, reg, grads = total_loss(params, ref, phi, x, y, config, w_ctx, tokens, with_grad=True)
        if not (np.isfinite(ce) and np.isfinite(reg)):
            raise RunError("fine-tuning produced a non-finite loss", t)
        opt.step(params, grads, lr)
        if ema is not None:
            ema = ema_update(ema, params, config.ema_decay)
        row = {"step": t, "lr": lr, "loss_ce": ce, "loss_reg": reg, "val_acc": None}
        if t % config.eval_every == 0 or t == config.steps:
            current = ema if ema is not None else params
            acc = _accuracy(current, bench.val)
            row["val_acc"] = acc
            if acc > best_acc:
                best_acc, best_step, best_params = acc, t, current.copy()
        trace.append(row)
    return TrainedModel(best_params, ref, config.method, config, best_step, trace)


def with_method(config: FinetuneConfig, name: str, **overrides) -> FinetuneConfig:
    return replace(config, method=Method.parse(name), **overrides)
