"""Post-hoc robustness methods over (zero-shot, fine-tuned) pairs and
candidate pools: weight interpolation, per-layer projection with learned
radii, greedy weight soups and greedy output ensembles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .data import Dataset
from .finetune import TrainedModel, ce_loss
from .numerics import Adam, softmax


def _params(candidate) -> M.ParamSet:
    return candidate.params if isinstance(candidate, TrainedModel) else M.ParamSet(candidate)


def wise(theta0: Mapping[str, np.ndarray], theta_t: Mapping[str, np.ndarray], lam: float) -> M.ParamSet:
    """``(1 - lam) * theta0 + lam * theta_t`` layer by layer."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixing coefficient must lie in [0, 1]")
    a, b = M.ParamSet(theta0), M.ParamSet(theta_t)
    a.check_structure(b)
    # exact endpoints (avoids -0.0 + 0.0 sign flips)
    if lam == 0.0:
        return a.copy()
    if lam == 1.0:
        return b.copy()
    return M.ParamSet({k: (1.0 - lam) * a[k] + lam * b[k] for k in a})


def tpgm_project(theta0, theta_t, gamma: Mapping[str, float]) -> M.ParamSet:
    """Shrink each layer's displacement from ``theta0`` into a ball of radius ``gamma[layer]``.

    A zero radius returns the zero-shot layer.
    """
    a, b = M.ParamSet(theta0), M.ParamSet(theta_t)
    a.check_structure(b)
    out = M.ParamSet()
    for k in a:
        g = float(gamma[k])
        if g < 0:
            raise ValueError(f"negative radius for {k}")
        d = b[k] - a[k]
        if g == 0.0:
            out[k] = a[k].copy()
            continue
        n = float(np.sqrt(np.sum(d * d)))
        # slack constraint: keep the fine-tuned layer bit for bit
        out[k] = b[k].copy() if n <= g else a[k] + d * (g / n)
    return out


def _softplus(r):
    return np.logaddexp(0.0, r)


def _softplus_inv(g):
    g = np.asarray(g, dtype=np.float64)
    return np.where(g > 30.0, g, np.log(np.expm1(np.maximum(g, 1e-300))))


def _sigmoid(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


def tpgm_objective(theta0, theta_t, gamma: Mapping[str, float], val: Dataset, reg: float = 0.0, with_grad: bool = False):
    """Validation cross-entropy of the projected model plus ``reg * sum(gamma)``.

    With ``with_grad`` also returns ``d objective / d gamma`` per layer; at a
    layer whose radius equals the displacement norm the left derivative is used.
    """
    a, b = M.ParamSet(theta0), M.ParamSet(theta_t)
    proj = tpgm_project(a, b, gamma)
    value = float(ce_loss(proj, val.x, val.label)) + reg * float(sum(gamma.values()))
    if not with_grad:
        return value
    _, grads = ce_loss(proj, val.x, val.label, with_grad=True)
    dgamma = {}
    for k in a:
        d = b[k] - a[k]
        n = float(np.sqrt(np.sum(d * d)))
        g = float(gamma[k])
        active = n > 0 and 0 < g <= n
        dgamma[k] = (float(np.sum(grads[k] * d)) / n if active else 0.0) + reg
    return value, dgamma


def tpgm_optimize(
    theta0,
    theta_t,
    val: Dataset,
    steps: int = 200,
    lr: float = 1e-2,
    reg: float = 0.0,
    history: list | None = None,
) -> dict[str, float]:
    """Adam on softplus-parameterised radii; ``reg > 0`` gives the controlled variant."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    a, b = M.ParamSet(theta0), M.ParamSet(theta_t)
    a.check_structure(b)
    keys = list(a)
    norms = np.array([np.sqrt(np.sum((b[k] - a[k]) ** 2)) for k in keys])
    rho = {"rho": _softplus_inv(np.maximum(norms, 1e-12))}
    opt = Adam({"rho": rho["rho"].shape})
    for _ in range(steps):
        gamma = dict(zip(keys, map(float, _softplus(rho["rho"]))))
        value, dg = tpgm_objective(a, b, gamma, val, reg, with_grad=True)
        if history is not None:
            history.append(value)
        grad = np.array([dg[k] for k in keys]) * _sigmoid(rho["rho"])
        opt.step(rho, {"rho": grad}, lr)
    gamma = dict(zip(keys, map(float, _softplus(rho["rho"]))))
    if history is not None:
        history.append(tpgm_objective(a, b, gamma, val, reg))
    return gamma


def _acc(params, ds: Dataset) -> float:
    return float(np.mean(np.argmax(M.predict_logits(params, ds.x), axis=1) == ds.label))


def _ranked(pool, val: Dataset) -> list[tuple[float, M.ParamSet]]:
    if not pool:
        raise ValueError("candidate pool is empty")
    members = [_params(c) for c in pool]
    for m in members[1:]:
        members[0].check_structure(m)
    scored = [(_acc(p, val), i, p) for i, p in enumerate(members)]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return [(acc, p) for acc, _, p in scored]


def _average(members: Sequence[M.ParamSet]) -> M.ParamSet:
    out = M.ParamSet({k: members[0][k].copy() for k in members[0]})
    for m in members[1:]:
        for k in out:
            out[k] = out[k] + m[k]
    return M.ParamSet({k: v / len(members) for k, v in out.items()})


def greedy_soup(pool, val: Dataset, return_members: bool = False):
    """Uniform weight average grown greedily in order of validation accuracy."""
    ranked = _ranked(pool, val)
    members = [ranked[0][1]]
    soup = _average(members)
    best = ranked[0][0]
    for _, cand in ranked[1:]:
        trial = _average(members + [cand])
        acc = _acc(trial, val)
        if acc >= best:
            members.append(cand)
            soup, best = trial, acc
    return (soup, members) if return_members else soup


@dataclass
class Ensemble:
    members: list[M.ParamSet]

    def predict_proba(self, x) -> np.ndarray:
        return np.mean([softmax(M.predict_logits(m, x)) for m in self.members], axis=0)

    def accuracy(self, ds: Dataset) -> float:
        return float(np.mean(np.argmax(self.predict_proba(ds.x), axis=1) == ds.label))


def greedy_ensemble(pool, val: Dataset, max_size: int = 4) -> Ensemble:
    """Output-averaging ensemble grown greedily, at most ``max_size`` members."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    ranked = _ranked(pool, val)
    ens = Ensemble([ranked[0][1]])
    best = ranked[0][0]
    for _, cand in ranked[1:]:
        if len(ens.members) >= max_size:
            break
        trial = Ensemble(ens.members + [cand])
        acc = trial.accuracy(val)
        if acc >= best:
            ens, best = trial, acc
    return ens
