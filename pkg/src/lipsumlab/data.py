"""Synthetic vision-language benchmark with a reference domain and
rotated/translated shift domains, plus the token generators.

Every random stream is derived from ``(seed, purpose tag)`` through
:func:`stream`, so datasets, initialisations and token draws can be
reproduced independently of one another.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

DEFAULT_SEQ_LEN = 8
DEFAULT_VOCAB = 64
DEFAULT_NUM_GUIDANCE = 80


def stream(seed: int, tag: str) -> np.random.Generator:
    """PCG64 generator keyed on a 64-bit seed and a purpose tag."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.PCG64([seed, zlib.crc32(tag.encode("utf-8"))]))


@dataclass(frozen=True)
class BenchmarkSpec:
    num_classes: int = 10
    d_in: int = 32
    angle_scales: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0)
    bias_scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    noise: float = 1.0
    prototype_scale: float = 1.0
    n_pretrain: int = 4000
    n_train: int = 2000
    n_val: int = 500
    n_test_per_domain: int = 1000
    vocab: int = DEFAULT_VOCAB
    seq_len: int = DEFAULT_SEQ_LEN
    seed: int = 0

    @property
    def num_shift_domains(self) -> int:
        return len(self.angle_scales)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_shift_domains < 1:
            raise ValueError("need at least one shift domain")
        if len(self.bias_scales) != len(self.angle_scales):
            raise ValueError("angle_scales and bias_scales must have equal length")
        if any(a < 0 for a in self.angle_scales) or any(b < 0 for b in self.bias_scales):
            raise ValueError("angle and bias scales must be non-negative")
        if not self.noise > 0:
            raise ValueError("noise must be positive")
        for name in ("d_in", "n_pretrain", "n_train", "n_val", "n_test_per_domain", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes > self.vocab:
            raise ValueError("num_classes must not exceed vocab")


@dataclass
class Dataset:
    x: np.ndarray
    label: np.ndarray
    domain: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def take(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.label[idx], self.domain[idx])


@dataclass
class Benchmark:
    spec: BenchmarkSpec
    prototypes: np.ndarray
    rotations: list[np.ndarray]
    biases: list[np.ndarray]
    pretrain: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    shift_tests: list[Dataset] = field(default_factory=list)

    @property
    def class_texts(self) -> np.ndarray:
        return class_texts(self.spec.num_classes, self.spec.seq_len, self.spec.vocab)

    def domain_tests(self) -> list[Dataset]:
        """Reference test set followed by each shift domain's test set."""
        return [self.test, *self.shift_tests]


def class_token_seq(k: int, length: int = DEFAULT_SEQ_LEN, vocab: int = DEFAULT_VOCAB) -> np.ndarray:
    """Deterministic token sequence ``t_j = (k (j+1) + j) mod V`` standing in for a class prompt."""
    if not 0 <= k < vocab:
        raise ValueError(f"class index {k} out of range for vocabulary {vocab}")
    j = np.arange(length, dtype=np.int64)
    return (k * (j + 1) + j) % vocab


def class_texts(num: int, length: int = DEFAULT_SEQ_LEN, vocab: int = DEFAULT_VOCAB, offset: int = 0) -> np.ndarray:
    return np.stack([class_token_seq(offset + k, length, vocab) for k in range(num)])


def sample_random_tokens(
    count: int, rng: np.random.Generator, length: int = DEFAULT_SEQ_LEN, vocab: int = DEFAULT_VOCAB
) -> np.ndarray:
    """``count`` sequences of i.i.d. uniform token ids, shape ``[count, length]``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return rng.integers(0, vocab, size=(count, length), dtype=np.int64)


def _rotation(rng: np.random.Generator, d: int, angle_scale: float) -> np.ndarray:
    g = rng.standard_normal((d, d))
    gen = (g - g.T) / np.sqrt(2.0 * d)
    rot = expm(angle_scale * gen)
    # expm of a skew matrix is orthogonal up to rounding; re-orthogonalise
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def _balanced_labels(n: int, k: int, rng: np.random.Generator | None = None) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % k
    if rng is not None:
        labels = rng.permutation(labels)
    return labels


def make_benchmark(spec: BenchmarkSpec) -> Benchmark:
    spec.validate()
    k, d = spec.num_classes, spec.d_in
    protos = spec.prototype_scale * stream(spec.seed, "prototypes").standard_normal((k, d))

    shift_rng = stream(spec.seed, "shifts")
    rotations, biases = [], []
    for a, b in zip(spec.angle_scales, spec.bias_scales):
        rotations.append(_rotation(shift_rng, d, a))
        biases.append(b * shift_rng.standard_normal(d))

    def draw(n: int, domain: int, rng: np.random.Generator, labels=None) -> Dataset:
        y = _balanced_labels(n, k) if labels is None else labels
        x = protos[y] + spec.noise * rng.standard_normal((n, d))
        if domain > 0:
            x = x @ rotations[domain - 1].T + biases[domain - 1]
        return Dataset(x, y, np.full(n, domain, dtype=np.int64))

    ref_rng = stream(spec.seed, "reference")
    train = draw(spec.n_train, 0, ref_rng, _balanced_labels(spec.n_train, k, ref_rng))
    val = draw(spec.n_val, 0, ref_rng, _balanced_labels(spec.n_val, k, ref_rng))
    test = draw(spec.n_test_per_domain, 0, ref_rng)

    shift_tests = [
        draw(spec.n_test_per_domain, s + 1, stream(spec.seed, f"shift_test_{s + 1}"))
        for s in range(spec.num_shift_domains)
    ]

    pre_rng = stream(spec.seed, "pretrain")
    pre_labels = _balanced_labels(spec.n_pretrain, k, pre_rng)
    pre_domains = pre_rng.integers(0, spec.num_shift_domains + 1, size=spec.n_pretrain)
    parts = []
    for s in range(spec.num_shift_domains + 1):
        idx = np.flatnonzero(pre_domains == s)
        parts.append((idx, draw(len(idx), s, pre_rng, pre_labels[idx])))
    px = np.zeros((spec.n_pretrain, d))
    for idx, ds in parts:
        px[idx] = ds.x
    pretrain = Dataset(px, pre_labels, pre_domains.astype(np.int64))

    return Benchmark(spec, protos, rotations, biases, pretrain, train, val, test, shift_tests)


def nearest_prototype_accuracy(bench: Benchmark, ds: Dataset) -> float:
    """Accuracy of assigning each input to the closest class prototype."""
    d2 = ((ds.x[:, None, :] - bench.prototypes[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(np.argmin(d2, axis=1) == ds.label))


def energy_token_pool(seed: int, size: int = 2000, length: int = DEFAULT_SEQ_LEN, vocab: int = DEFAULT_VOCAB) -> np.ndarray:
    """Fixed random token pool shared by every energy-gap evaluation of a run."""
    return sample_random_tokens(size, stream(seed, "energy_pool"), length, vocab)


def export_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    d = ds.x.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(d)] + ["label", "domain"])
        for row, y, s in zip(ds.x, ds.label, ds.domain):
            w.writerow([repr(float(v)) for v in row] + [int(y), int(s)])
