"""Strict JSON experiment configuration.

Unknown fields are rejected and every error names the offending path,
e.g. ``finetune.methods[2].lam: expected a number``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..data import BenchmarkSpec
from ..finetune import VARIANTS, FinetuneConfig, Method
from ..pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MethodEntry:
    name: str
    config: FinetuneConfig


@dataclass(frozen=True)
class TradeoffSettings:
    method: str = "FT"
    lrs: tuple[float, ...] = (3e-4, 1e-3, 3e-3, 1e-2)
    steps: tuple[int, ...] = (100, 250, 500, 1000)


@dataclass(frozen=True)
class PosthocSettings:
    base_methods: tuple[str, ...] = ("FT", "LIPSUM")
    wise_lambdas: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    tpgm_regs: tuple[float, ...] = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
    tpgm_steps: int = 200
    tpgm_lr: float = 1e-2
    soup_method: str = "FT"
    soup_lrs: tuple[float, ...] = (5e-4, 1e-3, 2e-3)
    soup_steps: tuple[int, ...] = (300, 500)
    soup_batches: tuple[int, ...] = (64,)
    ensemble_max_size: int = 4


@dataclass(frozen=True)
class EvaluationSettings:
    pool_size: int = 2000
    ece_bins: int = 15
    correlation_methods: tuple[str, ...] = ("FT", "L2SP", "KD", "CARFT", "LIPSUM", "EMA")


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune_defaults: FinetuneConfig = field(default_factory=FinetuneConfig)
    methods: tuple[MethodEntry, ...] = ()
    tradeoff: TradeoffSettings | None = field(default_factory=TradeoffSettings)
    posthoc: PosthocSettings | None = field(default_factory=PosthocSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/default"

    def method(self, name: str) -> MethodEntry:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)


# --- strict field coercion -------------------------------------------------


def _number(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    return float(v)


def _integer(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    return v


def _string(v, path):
    if not isinstance(v, str):
        raise ConfigError(f"{path}: expected a string, got {v!r}")
    return v


def _boolean(v, path):
    if not isinstance(v, bool):
        raise ConfigError(f"{path}: expected true/false, got {v!r}")
    return v


def _coerce(tp: str, v, path):
    optional = tp.endswith("| None")
    if optional:
        if v is None:
            return None
        tp = tp[: -len("| None")].strip()
    if tp.startswith("tuple["):
        inner = tp[len("tuple[") : -1].split(",")[0].strip()
        if not isinstance(v, list):
            raise ConfigError(f"{path}: expected a list, got {v!r}")
        return tuple(_coerce(inner, item, f"{path}[{i}]") for i, item in enumerate(v))
    handler = {"float": _number, "int": _integer, "str": _string, "bool": _boolean}.get(tp)
    if handler is None:
        raise ConfigError(f"{path}: unsupported field type {tp}")
    return handler(v, path)


def _build(cls, raw, path: str, skip: tuple[str, ...] = (), **extra):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(repr(u) for u in unknown)}")
    kwargs = {name: _coerce(fields[name].type, value, f"{path}.{name}") for name, value in raw.items()}
    try:
        obj = cls(**kwargs, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return obj


def _finetune(raw: dict, path: str, base: FinetuneConfig | None = None) -> FinetuneConfig:
    raw = dict(raw)
    method = raw.pop("method", None)
    ema = raw.pop("ema", None)
    if base is None:
        cfg = _build(FinetuneConfig, raw, path, skip=("method",))
    else:
        over = _build(FinetuneConfig, raw, path, skip=("method",))
        cfg = dataclasses.replace(base, **{k: getattr(over, k) for k in raw})
    if method is not None:
        name = _string(method, f"{path}.method")
        try:
            m = Method.parse(name)
        except ValueError as exc:
            raise ConfigError(f"{path}.method: {exc}") from exc
        if ema is not None:
            m = Method(m.variant, _boolean(ema, f"{path}.ema") or m.ema)
        cfg = dataclasses.replace(cfg, method=m)
    elif ema is not None:
        cfg = dataclasses.replace(cfg, method=Method(cfg.method.variant, _boolean(ema, f"{path}.ema")))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def _methods(raw, defaults: FinetuneConfig, path: str) -> tuple[MethodEntry, ...]:
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: expected a list")
    if not raw:
        raise ConfigError(f"{path}: method list must not be empty")
    out, seen = [], set()
    for i, item in enumerate(raw):
        p = f"{path}[{i}]"
        if isinstance(item, str):
            item = {"method": item}
        if not isinstance(item, dict):
            raise ConfigError(f"{p}: expected a method name or object")
        item = dict(item)
        name = item.pop("name", None)
        if "method" not in item:
            raise ConfigError(f"{p}.method: required field missing (one of {', '.join(VARIANTS)} or EMA)")
        cfg = _finetune(item, p, defaults)
        name = _string(name, f"{p}.name") if name is not None else cfg.method.label
        if name in seen:
            raise ConfigError(f"{p}.name: duplicate method name {name!r}")
        seen.add(name)
        out.append(MethodEntry(name, cfg))
    return tuple(out)


TOP_LEVEL = ("benchmark", "pretrain", "finetune", "tradeoff", "posthoc", "evaluation", "seeds", "output_dir")


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    unknown = sorted(set(raw) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"<root>: unknown field(s) {', '.join(repr(u) for u in unknown)}")

    bench = _build(BenchmarkSpec, raw.get("benchmark", {}), "benchmark", skip=("seed",))
    try:
        bench.validate()
    except ValueError as exc:
        raise ConfigError(f"benchmark: {exc}") from exc
    pre = _build(PretrainConfig, raw.get("pretrain", {}), "pretrain", skip=("seed",))
    try:
        pre.validate()
    except ValueError as exc:
        raise ConfigError(f"pretrain: {exc}") from exc

    ft_raw = raw.get("finetune")
    if not isinstance(ft_raw, dict):
        raise ConfigError("finetune: required object with a 'methods' list")
    unknown = sorted(set(ft_raw) - {"defaults", "methods"})
    if unknown:
        raise ConfigError(f"finetune: unknown field(s) {', '.join(repr(u) for u in unknown)}")
    defaults = _finetune(ft_raw.get("defaults", {}), "finetune.defaults")
    if "methods" not in ft_raw:
        raise ConfigError("finetune.methods: required field missing")
    methods = _methods(ft_raw["methods"], defaults, "finetune.methods")

    tradeoff = None
    if raw.get("tradeoff", {}) is not None:
        tradeoff = _build(TradeoffSettings, raw.get("tradeoff", {}), "tradeoff")
    posthoc = None
    if raw.get("posthoc", {}) is not None:
        posthoc = _build(PosthocSettings, raw.get("posthoc", {}), "posthoc")
        names = {m.name for m in methods}
        for i, b in enumerate(posthoc.base_methods):
            if b not in names:
                raise ConfigError(f"posthoc.base_methods[{i}]: {b!r} is not a configured method")
        if any(not 0 <= lam <= 1 for lam in posthoc.wise_lambdas):
            raise ConfigError("posthoc.wise_lambdas: values must lie in [0, 1]")
    evaluation = _build(EvaluationSettings, raw.get("evaluation", {}), "evaluation")

    seeds = _coerce("tuple[int, ...]", raw.get("seeds", [0]), "seeds")
    if not seeds:
        raise ConfigError("seeds: seed list must not be empty")
    output_dir = _string(raw.get("output_dir", "runs/default"), "output_dir")
    return ExperimentConfig(bench, pre, defaults, methods, tradeoff, posthoc, evaluation, seeds, output_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    return parse_config(raw)
