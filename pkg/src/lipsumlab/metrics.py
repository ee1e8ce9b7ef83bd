"""Evaluation: accuracy, calibration, likelihood, energy gap, feature
distortion and the correlation used for the robustness analysis."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as M
from .data import Benchmark, Dataset
from .numerics import log_softmax, softmax


class UndefinedResultError(ArithmeticError):
    """A statistic is undefined for the given input (e.g. zero variance)."""


def _check_probs(probs) -> np.ndarray:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.size == 0:
        raise ValueError("empty prediction set")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors summing to 1 (tol 1e-6)")
    return p


def accuracy(scores, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.argmax(s, axis=1) == labels))


def ece(probs, labels, bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins on (0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    p = _check_probs(probs)
    labels = np.asarray(labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n = len(conf)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        nb = int(mask.sum())
        if nb:
            total += nb / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def nll(probs, labels) -> float:
    """Mean ``-log p(label)`` for already-normalised probabilities (no clipping)."""
    p = _check_probs(probs)
    labels = np.asarray(labels)
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p[np.arange(len(labels)), labels])))


def nll_from_logits(logits, labels) -> float:
    lsm = log_softmax(np.atleast_2d(logits))
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    return float(-np.mean(lsm[np.arange(len(labels)), labels]))


def energy_gap(theta, theta0, phi, inputs, pool) -> float:
    """Mean over inputs and pool sequences of the squared energy change."""
    x = np.atleast_2d(inputs)
    pool = np.atleast_2d(pool)
    if x.shape[0] == 0 or pool.shape[0] == 0:
        raise ValueError("energy gap needs non-empty inputs and token pool")
    g = M.text_forward(phi, pool)
    dv = (M.vision_forward(theta, x) - M.vision_forward(theta0, x)) @ g.T
    return float(np.mean(dv**2))


def energy_vectors(theta, phi, inputs, pool) -> np.ndarray:
    """Raw ``[N, M]`` energies ``E(x, t)``, for export."""
    return -(M.vision_forward(theta, np.atleast_2d(inputs)) @ M.text_forward(phi, np.atleast_2d(pool)).T)


def feature_distortion(theta, theta0, inputs) -> float:
    """Mean Euclidean distance between features before and after fine-tuning."""
    x = np.atleast_2d(inputs)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    d = M.vision_forward(theta, x) - M.vision_forward(theta0, x)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def pearson_cc(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise UndefinedResultError("correlation undefined for zero variance")
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


@dataclass
class MetricsReport:
    domains: list[str]
    accuracy: list[float]
    ece: list[float]
    nll: list[float]
    energy_gap: float
    feature_distortion: list[float]
    metadata: dict = field(default_factory=dict)

    @property
    def ref_accuracy(self) -> float:
        return self.accuracy[0]

    @property
    def shift_accuracy(self) -> float:
        return float(np.mean(self.accuracy[1:]))

    @property
    def relative_shift_accuracy(self) -> float:
        return self.shift_accuracy / self.ref_accuracy

    def to_dict(self) -> dict:
        metrics = asdict(self)
        meta = metrics.pop("metadata")
        metrics["shift_accuracy_mean"] = self.shift_accuracy
        metrics["relative_shift_accuracy"] = self.relative_shift_accuracy
        return {"metadata": meta, "metrics": metrics}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        m = d["metrics"]
        return cls(
            list(m["domains"]),
            list(m["accuracy"]),
            list(m["ece"]),
            list(m["nll"]),
            float(m["energy_gap"]),
            list(m["feature_distortion"]),
            dict(d.get("metadata", {})),
        )


def domain_names(bench: Benchmark) -> list[str]:
    return ["ref"] + [f"shift{s + 1}" for s in range(len(bench.shift_tests))]


def evaluate(
    params: Mapping[str, np.ndarray],
    zero_shot_ref: Mapping[str, np.ndarray],
    phi,
    bench: Benchmark,
    pool: np.ndarray,
    metadata: dict | None = None,
    gap_inputs: Dataset | None = None,
    bins: int = 15,
) -> MetricsReport:
    """Full report for one parameter set; energy gap over the reference test inputs unless ``gap_inputs`` is given."""
    accs, eces, nlls, dists = [], [], [], []
    for ds in bench.domain_tests():
        u = M.predict_logits(params, ds.x)
        p = softmax(u)
        accs.append(accuracy(u, ds.label))
        eces.append(ece(p, ds.label, bins))
        nlls.append(nll_from_logits(u, ds.label))
        dists.append(feature_distortion(params, zero_shot_ref, ds.x))
    gx = (gap_inputs or bench.test).x
    gap = energy_gap(params, zero_shot_ref, phi, gx, pool)
    return MetricsReport(domain_names(bench), accs, eces, nlls, gap, dists, dict(metadata or {}))


def evaluate_predictor(
    predict_proba: Callable[[np.ndarray], np.ndarray],
    bench: Benchmark,
    metadata: dict | None = None,
    bins: int = 15,
) -> MetricsReport:
    """Report for an output-space predictor (e.g. an ensemble); parameter metrics are NaN."""
    accs, eces, nlls = [], [], []
    for ds in bench.domain_tests():
        p = predict_proba(ds.x)
        accs.append(accuracy(p, ds.label))
        eces.append(ece(p, ds.label, bins))
        nlls.append(nll(p, ds.label))
    n = len(accs)
    return MetricsReport(domain_names(bench), accs, eces, nlls, float("nan"), [float("nan")] * n, dict(metadata or {}))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())
