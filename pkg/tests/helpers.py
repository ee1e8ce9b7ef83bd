"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from lipsumlab import model as M
from lipsumlab.data import BenchmarkSpec
from lipsumlab.numerics import finite_diff_grad

SMALL_SPEC = BenchmarkSpec(
    num_classes=4,
    d_in=5,
    angle_scales=(1.0, 2.0),
    bias_scales=(0.5, 1.0),
    n_pretrain=200,
    n_train=60,
    n_val=30,
    n_test_per_domain=40,
    vocab=16,
    seq_len=3,
    seed=0,
)

# Entries whose true gradient is this small are compared on an absolute scale
# (central differences carry ~1e-11 round-off, which is not a relative quantity).
GRAD_FLOOR = 1e-6
GRAD_TOL = 1e-4


def small_params(seed: int, d_in=5, hidden=6, dim=4, vocab=16, d_embed=3, classes=4):
    """Random vision + head parameters and text parameters for gradient checks."""
    rng = np.random.default_rng(seed)
    theta = M.init_vision(rng, d_in, hidden, dim)
    theta["vision.b1"] = 0.3 * rng.standard_normal(hidden)
    theta["vision.b2"] = 0.3 * rng.standard_normal(dim)
    phi = M.init_text(rng, vocab, d_embed, dim)
    phi["text.bp"] = 0.3 * rng.standard_normal(dim)
    params = M.ParamSet({**theta, M.HEAD_KEY: rng.standard_normal((classes, dim))})
    return params, phi, rng


def perturb(params, rng, scale=0.3):
    return M.ParamSet({k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()})


def grad_rel_error(analytic, loss, params) -> float:
    """Max coordinate-wise relative error of ``analytic`` against central differences."""
    numeric = finite_diff_grad(loss, params)
    worst = 0.0
    for k, num in numeric.items():
        ana = np.asarray(analytic.get(k, np.zeros_like(num)))
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), GRAD_FLOOR)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


def _batch(rng, n=6, d_in=5, classes=4):
    return rng.standard_normal((n, d_in)), rng.integers(0, classes, n)


def gradient_case(name: str, seed: int):
    """Return ``(analytic_grads, loss_fn, params)`` for one gradient-check instance."""
    from lipsumlab import finetune as F
    from lipsumlab import posthoc as P
    from lipsumlab.data import Dataset
    from lipsumlab.pretrain import info_nce_loss, info_nce_value_and_grad

    params, phi, rng = small_params(seed)
    ref = perturb(params, rng)
    x, y = _batch(rng)
    if name == "CE":
        return F.ce_loss(params, x, y, with_grad=True)[1], lambda p: F.ce_loss(p, x, y), params
    if name == "InfoNCE":
        tokens = rng.integers(0, 16, (6, 3))
        both = M.ParamSet({**params.subset(M.VISION_KEYS), **phi})
        split = lambda p: ({k: p[k] for k in M.VISION_KEYS}, {k: p[k] for k in M.TEXT_KEYS})
        _, g = info_nce_value_and_grad(*split(both), x, tokens, 0.5)
        return g, lambda p: info_nce_loss(*split(p), x, tokens, 0.5), both
    if name == "TPGM":
        theta0 = params
        theta_t = perturb(params, rng, 0.5)
        val = Dataset(x, y, np.zeros(len(y), dtype=np.int64))
        gamma = {}
        for i, k in enumerate(theta0):
            n = float(np.sqrt(np.sum((theta_t[k] - theta0[k]) ** 2)))
            # alternate between active (shrinking) and slack layers
            gamma[k] = np.array(n * (rng.uniform(0.3, 0.8) if i % 2 == 0 else 1.5))
        _, dg = P.tpgm_objective(theta0, theta_t, gamma, val, reg=0.1, with_grad=True)
        loss = lambda g: P.tpgm_objective(theta0, theta_t, g, val, reg=0.1)
        return {k: np.array(v) for k, v in dg.items()}, loss, gamma

    variant = name
    cfg = F.FinetuneConfig(method=F.Method(variant), lam=0.7, tau=1.5 if "KLD" in variant or variant in ("KD", "CARFT") else 1.0)
    w_ctx = F.context_head(phi, 4, num_ctx=5, length=3) if variant.startswith("CARFT") else None
    tokens = rng.integers(0, 16, (7, 3)) if variant.startswith("LIPSUM") else None
    _, _, g = F.total_loss(params, ref, phi, x, y, cfg, w_ctx, tokens, with_grad=True)

    def loss(p):
        ce, reg = F.total_loss(p, ref, phi, x, y, cfg, w_ctx, tokens)
        return ce + cfg.coef * reg

    return g, loss, params


GRADIENT_CASES = ("CE", "InfoNCE", "L2SP", "KD", "CARFT", "CARFT_MSE", "LIPSUM", "LIPSUM_KLD", "FEATKD", "TPGM")


# --- acceptance bookkeeping ----------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str, str, float]] = {}


class Criterion:
    """Context manager that times a criterion, enforces its runtime budget and
    records a PASS/FAIL line for the terminal summary."""

    def __init__(self, number: int, title: str, budget: float | None = None, setup_seconds: float = 0.0):
        self.number, self.title, self.budget = number, title, budget
        self.detail = ""
        self.setup_seconds = setup_seconds

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def elapsed(self) -> float:
        import time

        return time.perf_counter() - self._t0 + self.setup_seconds

    def __exit__(self, exc_type, exc, tb):
        seconds = self.elapsed()
        ok = exc_type is None
        if ok and self.budget is not None and seconds >= self.budget:
            ok = False
            self.detail += f" runtime {seconds:.1f}s exceeds budget {self.budget:.0f}s"
            ACCEPTANCE[self.number] = (ok, self.title, self.detail.strip(), seconds)
            print(format_line(self.number))
            raise AssertionError(self.detail.strip())
        ACCEPTANCE[self.number] = (ok, self.title, self.detail.strip(), seconds)
        print(format_line(self.number))
        return False


def format_line(number: int) -> str:
    ok, title, detail, seconds = ACCEPTANCE[number]
    extra = f"; {detail}" if detail else ""
    return f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title} ({seconds:.2f}s{extra})"
