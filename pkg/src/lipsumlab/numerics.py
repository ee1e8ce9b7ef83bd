"""Stable probability transforms, shared loss primitives and a gradient oracle.

All functions work on float64 arrays and operate along the last axis, so a
single vector and a batch of row vectors go through the same code path.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def _as_float(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise ValueError("expected a non-empty vector")
    return arr


def logsumexp(v) -> np.ndarray:
    v = _as_float(v)
    m = np.max(v, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(v - m), axis=-1, keepdims=True)))[..., 0]


def softmax(v) -> np.ndarray:
    v = _as_float(v)
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = _as_float(v)
    return v - logsumexp(v)[..., None]


def cross_entropy(logits, label) -> float | np.ndarray:
    """``-log_softmax(logits)[label]``; batched when ``logits`` is 2-D."""
    lsm = log_softmax(logits)
    label = np.asarray(label)
    k = lsm.shape[-1]
    if np.any(label < 0) or np.any(label >= k):
        raise ValueError(f"label out of range for {k} classes")
    if lsm.ndim == 1:
        return float(-lsm[int(label)])
    return -np.take_along_axis(lsm, label.reshape(-1, 1).astype(np.int64), axis=-1)[:, 0]


def kld_tempered(v_student, v_teacher, tau: float = 1.0) -> float | np.ndarray:
    """Temperature-scaled distillation loss.

    Returns ``-tau**2 * sum(softmax(v_teacher/tau) * log_softmax(v_student/tau))``.
    The teacher-entropy term is part of the value (it has no gradient).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    vs = _as_float(v_student)
    vt = _as_float(v_teacher)
    if vs.shape != vt.shape:
        raise ValueError(f"shape mismatch: {vs.shape} vs {vt.shape}")
    out = -(tau**2) * np.sum(softmax(vt / tau) * log_softmax(vs / tau), axis=-1)
    return float(out) if out.ndim == 0 else out


def kld_tempered_grad(v_student, v_teacher, tau: float = 1.0) -> np.ndarray:
    """Gradient of :func:`kld_tempered` with respect to the student logits."""
    vs = _as_float(v_student)
    vt = _as_float(v_teacher)
    return tau * (softmax(vs / tau) - softmax(vt / tau))


def mse_half(u, v, m: int | None = None) -> float | np.ndarray:
    """``(1 / 2M) * ||u - v||^2`` along the last axis."""
    u = _as_float(u)
    v = _as_float(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if m is None:
        m = u.shape[-1]
    if m < 1:
        raise ValueError("M must be >= 1")
    out = np.sum((u - v) ** 2, axis=-1) / (2.0 * m)
    return float(out) if out.ndim == 0 else out


def kld_mse_limit(v_student, v_teacher) -> float:
    """Large-temperature limit of the KL part of :func:`kld_tempered`.

    ``(1/2M)||v - v0||^2 - (1/2M^2) (sum v - sum v0)^2``, i.e. half the
    population variance of the logit difference.
    """
    d = _as_float(v_student) - _as_float(v_teacher)
    m = d.shape[-1]
    return float(np.sum(d**2) / (2 * m) - np.sum(d) ** 2 / (2 * m * m))


def finite_diff_grad(
    loss: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss`` over every coordinate of ``params``.

    ``params`` may be any mapping of name -> array (a :class:`ParamSet` works);
    a bare array is treated as a single unnamed entry.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    single = isinstance(params, np.ndarray) or np.isscalar(params)
    work = {"": np.array(params, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in params.items()
    }

    def call():
        if single:
            return float(loss(work[""].copy() if work[""].ndim else float(work[""])))
        return float(loss(_rewrap(params, work)))

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = call()
            flat[i] = orig - eps
            minus = call()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * eps)
        grads[name] = g
    if single:
        return grads[""]
    return grads


def _rewrap(template, arrays):
    # keep ParamSet (or any mapping type with a dict constructor) for the callee
    try:
        return type(template)({k: v.copy() for k, v in arrays.items()})
    except TypeError:
        return {k: v.copy() for k, v in arrays.items()}


def max_rel_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], floor: float = 1e-8) -> float:
    """Largest coordinate-wise ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for k in a:
        x = np.asarray(a[k], dtype=np.float64)
        y = np.asarray(b[k], dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


class Adam:
    """Adam over a dict of arrays (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, shapes: Mapping[str, tuple], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
