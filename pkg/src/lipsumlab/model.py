"""Dual encoder: an MLP vision tower, a mean-pooled embedding text tower,
the zero-shot head built from class texts, and the inner-product energy.

Inputs may be a single vector (``x`` of shape ``[d_in]``, ``t`` of shape
``[L]``) or a batch (``[N, d_in]`` / ``[N, L]``); outputs follow suit.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

VISION_KEYS = ("vision.W1", "vision.b1", "vision.W2", "vision.b2")
HEAD_KEY = "head.W"
TEXT_KEYS = ("text.Emb", "text.Wp", "text.bp")


class ParamSet(dict):
    """Named float64 arrays. Arithmetic helpers act layer by layer."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for k, v in list(self.items()):
            dict.__setitem__(self, k, np.asarray(v, dtype=np.float64))

    def __setitem__(self, key, value):
        super().__setitem__(key, np.asarray(value, dtype=np.float64))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def subset(self, keys: Iterable[str]) -> "ParamSet":
        return ParamSet({k: self[k] for k in keys})

    def check_structure(self, other: Mapping[str, np.ndarray]) -> None:
        if list(self.keys()) != list(other.keys()):
            raise ValueError(f"layer mismatch: {list(self)} vs {list(other)}")
        for k in self:
            if self[k].shape != np.shape(other[k]):
                raise ValueError(f"shape mismatch in {k}: {self[k].shape} vs {np.shape(other[k])}")

    def __add__(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        self.check_structure(other)
        return ParamSet({k: self[k] + other[k] for k in self})

    def __sub__(self, other: Mapping[str, np.ndarray]) -> "ParamSet":
        self.check_structure(other)
        return ParamSet({k: self[k] - other[k] for k in self})

    def scale(self, c: float) -> "ParamSet":
        return ParamSet({k: c * v for k, v in self.items()})

    def layer_norms_sq(self) -> dict[str, float]:
        return {k: float(np.sum(v * v)) for k, v in self.items()}

    def norm_sq(self) -> float:
        return float(sum(self.layer_norms_sq().values()))

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values()]) if self else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        out, i = ParamSet(), 0
        for k, v in self.items():
            out[k] = np.asarray(flat[i : i + v.size]).reshape(v.shape)
            i += v.size
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    def bitwise_equal(self, other: Mapping[str, np.ndarray]) -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == np.asarray(other[k]).tobytes()
            for k in self
        )


def init_vision(rng: np.random.Generator, d_in: int, hidden: int, dim: int) -> ParamSet:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    return ParamSet(
        {
            "vision.W1": rng.standard_normal((hidden, d_in)) / np.sqrt(d_in),
            "vision.b1": np.zeros(hidden),
            "vision.W2": rng.standard_normal((dim, hidden)) / np.sqrt(hidden),
            "vision.b2": np.zeros(dim),
        }
    )


def init_text(rng: np.random.Generator, vocab: int, d_embed: int, dim: int) -> ParamSet:
    # the embedding table is a lookup, fan_in 1
    return ParamSet(
        {
            "text.Emb": rng.standard_normal((vocab, d_embed)),
            "text.Wp": rng.standard_normal((dim, d_embed)) / np.sqrt(d_embed),
            "text.bp": np.zeros(dim),
        }
    )


def _check_input(theta, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d_in = theta["vision.W1"].shape[1]
    if x.shape[-1] != d_in or x.ndim not in (1, 2):
        raise ValueError(f"input shape {x.shape} incompatible with d_in={d_in}")
    return x


def vision_forward_cache(theta: Mapping[str, np.ndarray], x):
    x = _check_input(theta, x)
    pre = x @ theta["vision.W1"].T + theta["vision.b1"]
    h = np.maximum(pre, 0.0)
    feats = h @ theta["vision.W2"].T + theta["vision.b2"]
    return feats, (x, pre, h)


def vision_forward(theta: Mapping[str, np.ndarray], x) -> np.ndarray:
    """``F(x) = W2 relu(W1 x + b1) + b2`` (no normalisation)."""
    return vision_forward_cache(theta, x)[0]


def vision_backward(theta: Mapping[str, np.ndarray], cache, d_feats: np.ndarray) -> dict[str, np.ndarray]:
    """Backprop ``dL/dF`` (shape ``[N, D]``) to the vision parameters."""
    x, pre, h = cache
    x2, pre2, h2 = np.atleast_2d(x), np.atleast_2d(pre), np.atleast_2d(h)
    dF = np.atleast_2d(d_feats)
    dh = dF @ theta["vision.W2"]
    dpre = dh * (pre2 > 0)
    return {
        "vision.W1": dpre.T @ x2,
        "vision.b1": dpre.sum(axis=0),
        "vision.W2": dF.T @ h2,
        "vision.b2": dF.sum(axis=0),
    }


def _check_tokens(phi, tokens) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim not in (1, 2) or t.shape[-1] < 1:
        raise ValueError(f"token array must be [L] or [N, L], got shape {t.shape}")
    vocab = phi["text.Emb"].shape[0]
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if np.any(t < 0) or np.any(t >= vocab):
        raise ValueError(f"token id out of range for vocabulary of size {vocab}")
    return t


def rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T`` computed row by row with one summation order, so a single
    row gives bitwise the same result as the same row inside a batch (BLAS
    does not guarantee this)."""
    return np.sum(a[..., None, :] * b, axis=-1)


def text_forward(phi: Mapping[str, np.ndarray], tokens) -> np.ndarray:
    """``G(t) = Wp mean_j Emb[t_j] + bp``."""
    t = _check_tokens(phi, tokens)
    pooled = phi["text.Emb"][t].mean(axis=-2)
    return rowdot(pooled, phi["text.Wp"]) + phi["text.bp"]


def text_backward(phi: Mapping[str, np.ndarray], tokens, d_text: np.ndarray) -> dict[str, np.ndarray]:
    t = np.atleast_2d(_check_tokens(phi, tokens))
    dG = np.atleast_2d(d_text)
    pooled = phi["text.Emb"][t].mean(axis=1)
    d_pooled = dG @ phi["text.Wp"]
    d_emb = np.zeros_like(phi["text.Emb"])
    length = t.shape[1]
    np.add.at(d_emb, t, np.repeat(d_pooled[:, None, :] / length, length, axis=1))
    return {"text.Emb": d_emb, "text.Wp": dG.T @ pooled, "text.bp": dG.sum(axis=0)}


def zero_shot_head(phi: Mapping[str, np.ndarray], class_texts) -> np.ndarray:
    """Stack text features of the class texts into a ``[K, D]`` head."""
    t = np.asarray(class_texts)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ValueError("need at least two class texts as a [K, L] array")
    return text_forward(phi, t)


def logits(W: np.ndarray, theta: Mapping[str, np.ndarray], x) -> np.ndarray:
    feats = vision_forward(theta, x)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != feats.shape[-1]:
        raise ValueError(f"head shape {W.shape} incompatible with feature dim {feats.shape[-1]}")
    return rowdot(feats, W)


def predict_logits(params: Mapping[str, np.ndarray], x) -> np.ndarray:
    """Class logits of a full parameter set holding both vision layers and ``head.W``."""
    return logits(params[HEAD_KEY], params, x)


def text_logits(theta, phi, x, tokens) -> np.ndarray:
    """``v[m] = <G(t_m), F(x)>`` for M token sequences; ``[M]`` or ``[N, M]``."""
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    return rowdot(vision_forward(theta, x), text_forward(phi, t))


def energy(theta, phi, x, t) -> float | np.ndarray:
    """``E(x, t) = -<F(x), G(t)>``."""
    f = vision_forward(theta, x)
    g = text_forward(phi, t)
    if f.shape[-1] != g.shape[-1]:
        raise ValueError("vision and text feature dimensions differ")
    out = -np.sum(f * g, axis=-1) if f.ndim == g.ndim else -rowdot(f, g)
    return float(out) if np.ndim(out) == 0 else out
