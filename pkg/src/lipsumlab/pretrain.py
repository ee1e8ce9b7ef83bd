"""Contrastive (InfoNCE) pre-training that produces the zero-shot model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import Benchmark, class_texts, stream
from .numerics import log_softmax, softmax


class RunError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch: int = 10
    lr: float = 0.05
    temperature: float = 0.5
    hidden: int = 64
    dim: int = 16
    embed_dim: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 2:
            raise ValueError("batch must be >= 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def _similarity(theta, phi, x, tokens, tau):
    feats, cache = M.vision_forward_cache(theta, x)
    text = M.text_forward(phi, tokens)
    return feats, cache, text, feats @ text.T / tau


def info_nce_loss(theta, phi, x, tokens, tau: float = 0.5) -> float:
    """Symmetric InfoNCE over a batch of ``B`` aligned (x, t) pairs."""
    x = np.atleast_2d(x)
    if x.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    _, _, _, s = _similarity(theta, phi, x, tokens, tau)
    diag = np.arange(s.shape[0])
    rows = -log_softmax(s)[diag, diag].mean()
    cols = -log_softmax(s.T)[diag, diag].mean()
    return float(0.5 * rows + 0.5 * cols)


def info_nce_value_and_grad(theta, phi, x, tokens, tau: float = 0.5):
    """Loss plus gradients for the vision and text parameters."""
    x = np.atleast_2d(x)
    b = x.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs")
    feats, cache, text, s = _similarity(theta, phi, x, tokens, tau)
    diag = np.arange(b)
    p_rows = softmax(s)
    p_cols = softmax(s.T).T
    loss = 0.5 * (-log_softmax(s)[diag, diag].mean()) + 0.5 * (-log_softmax(s.T)[diag, diag].mean())
    eye = np.eye(b)
    d_s = (0.5 * (p_rows - eye) + 0.5 * (p_cols - eye)) / b
    d_feats = d_s @ text / tau
    d_text = d_s.T @ feats / tau
    grads = M.vision_backward(theta, cache, d_feats)
    grads.update(M.text_backward(phi, tokens, d_text))
    return float(loss), grads


@dataclass
class PretrainResult:
    vision: M.ParamSet
    text: M.ParamSet
    trace: list[float] = field(default_factory=list)


def init_params(bench: Benchmark, config: PretrainConfig) -> tuple[M.ParamSet, M.ParamSet]:
    spec = bench.spec
    rng = stream(config.seed, "init")
    theta = M.init_vision(rng, spec.d_in, config.hidden, config.dim)
    phi = M.init_text(rng, spec.vocab, config.embed_dim, config.dim)
    return theta, phi


def contrastive_pretrain(bench: Benchmark, config: PretrainConfig) -> PretrainResult:
    """Plain SGD on InfoNCE over the pre-training pairs.

    Each minibatch holds ``batch`` distinct classes (one example each), so
    every row and column of the similarity matrix has a unique positive.
    """
    config.validate()
    k = bench.spec.num_classes
    if config.batch > k:
        raise ValueError(f"batch ({config.batch}) cannot exceed the number of classes ({k})")
    theta, phi = init_params(bench, config)
    texts = class_texts(k, bench.spec.seq_len, bench.spec.vocab)
    by_class = [np.flatnonzero(bench.pretrain.label == c) for c in range(k)]
    rng = stream(config.seed, "pretrain_batches")
    params = {**theta, **phi}
    trace = []
    for step in range(config.steps):
        classes = rng.choice(k, size=config.batch, replace=False)
        idx = np.array([by_class[c][rng.integers(len(by_class[c]))] for c in classes])
        x = bench.pretrain.x[idx]
        loss, grads = info_nce_value_and_grad(
            {n: params[n] for n in M.VISION_KEYS},
            {n: params[n] for n in M.TEXT_KEYS},
            x,
            texts[classes],
            config.temperature,
        )
        if not np.isfinite(loss):
            raise RunError("pre-training diverged", step)
        trace.append(loss)
        if config.lr:
            for n, g in grads.items():
                params[n] = params[n] - config.lr * g
    vision = M.ParamSet({n: params[n] for n in M.VISION_KEYS})
    text = M.ParamSet({n: params[n] for n in M.TEXT_KEYS})
    return PretrainResult(vision, text, trace)
