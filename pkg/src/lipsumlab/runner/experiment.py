"""Experiment orchestration: pre-training per seed, the fine-tuning method
grid, evaluation, post-hoc sweeps and the aggregate tables.

Output layout under the output directory::

    seed<N>/pretrain.rfl, pretrain_trace.csv
    seed<N>/zeroshot/report.json
    seed<N>/<method>/model.rfl, trace.csv, report.json
    seed<N>/posthoc/wise_<method>.csv, tpgmc_<method>.csv, soup.json,
                    <method>+WiSE/report.json, <method>+TPGM/report.json,
                    soup/report.json, ensemble/report.json
    seed<N>/tradeoff.csv
    tables/methods.csv, tradeoff.csv, energy_gap.csv, wise_<m>.csv, tpgmc_<m>.csv
    sweep_summary.json, errors.json, summary.json, summary.csv
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .. import model as M
from ..data import Benchmark, energy_token_pool, make_benchmark
from ..finetune import FinetuneConfig, Method, TrainedModel, finetune
from ..metrics import MetricsReport, UndefinedResultError, evaluate, evaluate_predictor, pearson_cc
from ..posthoc import greedy_ensemble, greedy_soup, tpgm_optimize, tpgm_project, wise
from ..pretrain import PretrainResult, RunError, contrastive_pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .report import write_report

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "lr", "loss_ce", "loss_reg", "val_acc")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SeedContext:
    seed: int
    bench: Benchmark
    vision0: M.ParamSet
    text: M.ParamSet
    ref: M.ParamSet
    pool: np.ndarray
    models: dict[str, TrainedModel] = field(default_factory=dict)
    reports: dict[str, MetricsReport] = field(default_factory=dict)

    @property
    def dir_name(self) -> str:
        return f"seed{self.seed}"


@dataclass
class RunLog:
    errors: list[dict] = field(default_factory=list)

    def cell(self, what: str, seed: int, fn, *args, **kwargs):
        """Run one experiment cell; failures are recorded and ``None`` returned."""
        try:
            return fn(*args, **kwargs)
        except (RunError, ValueError, ArithmeticError, FloatingPointError) as exc:
            log.warning("cell %s (seed %d) failed: %s", what, seed, exc)
            self.errors.append(
                {"cell": what, "seed": seed, "error": f"{type(exc).__name__}: {exc}",
                 "where": traceback.format_exception_only(type(exc), exc)[-1].strip()}
            )
            return None


# --- per seed stages -----------------------------------------------------------


def prepare_seed(cfg: ExperimentConfig, seed: int, out: Path, reuse: bool = True) -> SeedContext:
    """Build the benchmark and load or run pre-training for ``seed``."""
    bench = make_benchmark(replace(cfg.benchmark, seed=seed))
    sdir = out / f"seed{seed}"
    ck_path = sdir / "pretrain.rfl"
    if reuse and ck_path.exists():
        ck = load_checkpoint(ck_path)
        vision = ck.params.subset(M.VISION_KEYS)
        text = ck.params.subset(M.TEXT_KEYS)
    else:
        res: PretrainResult = contrastive_pretrain(bench, replace(cfg.pretrain, seed=seed))
        vision, text = res.vision, res.text
        meta = {"kind": "pretrain", "seed": seed, "steps": cfg.pretrain.steps,
                "final_loss": res.trace[-1] if res.trace else None}
        save_checkpoint({**vision, **text}, meta, ck_path)
        write_csv(sdir / "pretrain_trace.csv", ("step", "loss"), enumerate(res.trace))
    ref = M.ParamSet({**vision, M.HEAD_KEY: M.zero_shot_head(text, bench.class_texts)})
    pool = energy_token_pool(seed, cfg.evaluation.pool_size, cfg.benchmark.seq_len, cfg.benchmark.vocab)
    return SeedContext(seed, bench, vision, text, ref, pool)


def _save_model(ctx: SeedContext, name: str, tm: TrainedModel, out: Path) -> None:
    mdir = out / ctx.dir_name / name
    meta = {"method": name, "seed": ctx.seed, "selected_step": tm.selected_step, "config": tm.config.to_dict()}
    save_checkpoint(tm.params, meta, mdir / "model.rfl")
    write_csv(mdir / "trace.csv", TRACE_FIELDS, ([r[f] for f in TRACE_FIELDS] for r in tm.trace))


def finetune_seed(cfg: ExperimentConfig, ctx: SeedContext, out: Path, runlog: RunLog) -> None:
    for entry in cfg.methods:
        fc = replace(entry.config, seed=ctx.seed)
        tm = runlog.cell(f"finetune/{entry.name}", ctx.seed, finetune, ctx.vision0, ctx.text, ctx.bench, fc)
        if tm is not None:
            ctx.models[entry.name] = tm
            _save_model(ctx, entry.name, tm, out)


def load_models(cfg: ExperimentConfig, ctx: SeedContext, out: Path) -> None:
    for entry in cfg.methods:
        path = out / ctx.dir_name / entry.name / "model.rfl"
        if entry.name in ctx.models or not path.exists():
            continue
        ck = load_checkpoint(path)
        fc = replace(entry.config, seed=ctx.seed)
        ctx.models[entry.name] = TrainedModel(ck.params, ctx.ref, fc.method, fc, int(ck.metadata.get("selected_step", 0)))


def _report(cfg, ctx: SeedContext, params, name: str, kind: str, extra: dict | None = None) -> MetricsReport:
    meta = {"method": name, "kind": kind, "seed": ctx.seed, **(extra or {})}
    return evaluate(params, ctx.ref, ctx.text, ctx.bench, ctx.pool, meta, bins=cfg.evaluation.ece_bins)


def evaluate_seed(cfg: ExperimentConfig, ctx: SeedContext, out: Path, runlog: RunLog) -> None:
    zs = runlog.cell("evaluate/zero-shot", ctx.seed, _report, cfg, ctx, ctx.ref, "zero-shot", "zero-shot")
    if zs is not None:
        ctx.reports["zero-shot"] = zs
        write_json(out / ctx.dir_name / "zeroshot" / "report.json", zs.to_dict())
    for entry in cfg.methods:
        tm = ctx.models.get(entry.name)
        if tm is None:
            continue
        extra = {"config_hash": config_hash(tm.config.to_dict()), "selected_step": tm.selected_step}
        rep = runlog.cell(f"evaluate/{entry.name}", ctx.seed, _report, cfg, ctx, tm.params, entry.name, "finetune", extra)
        if rep is not None:
            ctx.reports[entry.name] = rep
            write_json(out / ctx.dir_name / entry.name / "report.json", rep.to_dict())


def _acc_row(value, rep: MetricsReport) -> list:
    return [value, rep.ref_accuracy, rep.shift_accuracy, *rep.accuracy, rep.energy_gap]


def _sweep_header(ctx: SeedContext, first: str) -> list[str]:
    return [first, "ref_acc", "shift_acc_mean", *[f"acc_{d}" for d in ("ref", *[f"shift{i + 1}" for i in range(len(ctx.bench.shift_tests))])], "energy_gap"]


def wise_sweep(cfg, ctx: SeedContext, base: str, lambdas) -> list[list]:
    tm = ctx.models[base]
    rows = []
    for lam in lambdas:
        rep = _report(cfg, ctx, wise(ctx.ref, tm.params, lam), f"{base}+WiSE({lam})", "posthoc")
        rows.append(_acc_row(lam, rep))
    return rows


def tpgm_sweep(cfg, ctx: SeedContext, base: str, regs, steps: int, lr: float) -> list[list]:
    tm = ctx.models[base]
    rows = []
    for reg in regs:
        gamma = tpgm_optimize(ctx.ref, tm.params, ctx.bench.val, steps, lr, reg)
        rep = _report(cfg, ctx, tpgm_project(ctx.ref, tm.params, gamma), f"{base}+TPGM-C({reg})", "posthoc")
        rows.append(_acc_row(reg, rep))
    return rows


def soup_pool(cfg: ExperimentConfig, ctx: SeedContext, runlog: RunLog) -> list[TrainedModel]:
    ph = cfg.posthoc
    base = cfg.finetune_defaults
    pool = []
    for lr in ph.soup_lrs:
        for steps in ph.soup_steps:
            for batch in ph.soup_batches:
                fc = replace(base, method=Method.parse(ph.soup_method), lr=lr, steps=steps, batch=batch, seed=ctx.seed)
                tm = runlog.cell(f"soup/lr={lr},steps={steps},batch={batch}", ctx.seed, finetune, ctx.vision0, ctx.text, ctx.bench, fc)
                if tm is not None:
                    pool.append(tm)
    return pool


def posthoc_seed(cfg: ExperimentConfig, ctx: SeedContext, out: Path, runlog: RunLog) -> dict:
    ph = cfg.posthoc
    pdir = out / ctx.dir_name / "posthoc"
    results: dict = {"wise": {}, "tpgmc": {}}
    for base in ph.base_methods:
        if base not in ctx.models:
            continue
        rows = runlog.cell(f"wise/{base}", ctx.seed, wise_sweep, cfg, ctx, base, ph.wise_lambdas)
        if rows is not None:
            results["wise"][base] = rows
            write_csv(pdir / f"wise_{base}.csv", _sweep_header(ctx, "lambda_or_reg"), rows)
            rep = _report(cfg, ctx, wise(ctx.ref, ctx.models[base].params, 0.9), f"{base}+WiSE", "posthoc", {"lambda": 0.9})
            write_json(pdir / f"{base}+WiSE" / "report.json", rep.to_dict())
        rows = runlog.cell(f"tpgmc/{base}", ctx.seed, tpgm_sweep, cfg, ctx, base, ph.tpgm_regs, ph.tpgm_steps, ph.tpgm_lr)
        if rows is not None:
            results["tpgmc"][base] = rows
            write_csv(pdir / f"tpgmc_{base}.csv", _sweep_header(ctx, "lambda_or_reg"), rows)

    pool = soup_pool(cfg, ctx, runlog)
    if pool:
        val = ctx.bench.val
        cand_acc = [float(np.mean(np.argmax(M.predict_logits(tm.params, val.x), 1) == val.label)) for tm in pool]
        soup, members = greedy_soup(pool, val, return_members=True)
        ens = greedy_ensemble(pool, val, ph.ensemble_max_size)
        soup_val = float(np.mean(np.argmax(M.predict_logits(soup, val.x), 1) == val.label))
        info = {
            "candidate_val_acc": cand_acc,
            "soup_val_acc": soup_val,
            "soup_size": len(members),
            "ensemble_val_acc": ens.accuracy(val),
            "ensemble_size": len(ens.members),
            "ensemble_max_size": ph.ensemble_max_size,
        }
        results["soup"] = info
        write_json(pdir / "soup.json", info)
        rep = _report(cfg, ctx, soup, "Soup", "posthoc", {"size": len(members)})
        write_json(pdir / "soup" / "report.json", rep.to_dict())
        erep = evaluate_predictor(ens.predict_proba, ctx.bench, {"method": "Ensemble", "kind": "posthoc", "seed": ctx.seed,
                                                                  "size": len(ens.members)}, cfg.evaluation.ece_bins)
        write_json(pdir / "ensemble" / "report.json", erep.to_dict())
    return results


def tradeoff_seed(cfg: ExperimentConfig, ctx: SeedContext, out: Path, runlog: RunLog) -> list[list]:
    """FT with varied learning rate (steps fixed) and varied steps (lr fixed)."""
    to = cfg.tradeoff
    base = replace(cfg.finetune_defaults, method=Method.parse(to.method), seed=ctx.seed)
    cells = [("lr", lr, replace(base, lr=lr)) for lr in to.lrs] + [("steps", s, replace(base, steps=s)) for s in to.steps]
    rows = []
    zs = ctx.reports.get("zero-shot") or _report(cfg, ctx, ctx.ref, "zero-shot", "zero-shot")
    rows.append(["zero_shot", "", zs.ref_accuracy, zs.shift_accuracy, *zs.accuracy, zs.energy_gap])
    for kind, value, fc in cells:
        tm = runlog.cell(f"tradeoff/{kind}={value}", ctx.seed, finetune, ctx.vision0, ctx.text, ctx.bench, fc)
        if tm is None:
            continue
        rep = _report(cfg, ctx, tm.params, f"{to.method}({kind}={value})", "tradeoff")
        rows.append([kind, value, rep.ref_accuracy, rep.shift_accuracy, *rep.accuracy, rep.energy_gap])
    write_csv(out / ctx.dir_name / "tradeoff.csv", ["sweep", *_sweep_header(ctx, "value")], rows)
    return rows


# --- aggregation -------------------------------------------------------------


def _mean_rows(rows_per_seed: list[list[list]], key_cols: int) -> list[list]:
    """Average numeric columns of aligned per-seed tables (rows matched by their key columns)."""
    if not rows_per_seed:
        return []
    buckets: dict[tuple, list[list]] = {}
    order = []
    for rows in rows_per_seed:
        for row in rows:
            key = tuple(row[:key_cols])
            if key not in buckets:
                buckets[key] = []
                order.append(key)
            buckets[key].append(row[key_cols:])
    out = []
    for key in order:
        vals = np.array(buckets[key], dtype=np.float64)
        out.append([*key, *vals.mean(axis=0).tolist()])
    return out


def aggregate(cfg: ExperimentConfig, out: Path, contexts: list[SeedContext], posthoc: list[dict], tradeoff: list[list[list]]) -> dict:
    tables = out / "tables"
    ctx0 = contexts[0]
    summary: dict = {}

    if tradeoff:
        write_csv(tables / "tradeoff.csv", ["sweep", *_sweep_header(ctx0, "value")], _mean_rows(tradeoff, 2))

    # energy gap vs relative shift accuracy, seed-averaged per method
    names = ["zero-shot", *[m.name for m in cfg.methods]]
    gap_rows = []
    for name in names:
        reps = [c.reports[name] for c in contexts if name in c.reports]
        if not reps:
            continue
        gap_rows.append([
            name,
            "zero-shot" if name == "zero-shot" else "finetune",
            float(np.mean([r.energy_gap for r in reps])),
            float(np.mean([r.relative_shift_accuracy for r in reps])),
            float(np.mean([r.ref_accuracy for r in reps])),
            float(np.mean([r.shift_accuracy for r in reps])),
            float(np.mean([np.mean(r.feature_distortion) for r in reps])),
            len(reps),
        ])
    write_csv(tables / "energy_gap.csv",
              ("method", "kind", "energy_gap", "relative_shift_acc", "ref_acc", "shift_acc_mean", "feature_distortion", "n_seeds"),
              gap_rows)
    corr = [r for r in gap_rows if r[0] in cfg.evaluation.correlation_methods]
    try:
        summary["pcc_energy_gap_vs_relative_shift"] = pearson_cc([r[2] for r in corr], [r[3] for r in corr])
    except (ValueError, UndefinedResultError) as exc:
        summary["pcc_energy_gap_vs_relative_shift"] = None
        summary["pcc_error"] = str(exc)
    summary["correlation_methods"] = [r[0] for r in corr]

    if posthoc and cfg.posthoc is not None:
        for kind in ("wise", "tpgmc"):
            for base in cfg.posthoc.base_methods:
                per_seed = [p[kind][base] for p in posthoc if base in p.get(kind, {})]
                if per_seed:
                    write_csv(tables / f"{kind}_{base}.csv", _sweep_header(ctx0, "lambda_or_reg"), _mean_rows(per_seed, 1))
        soups = [p["soup"] for p in posthoc if "soup" in p]
        if soups:
            summary["soup"] = soups
    return summary


def selected_seeds(cfg: ExperimentConfig, seed: int | None) -> list[int]:
    return [seed] if seed is not None else list(cfg.seeds)


def run(cfg: ExperimentConfig, out: Path | None = None, seed: int | None = None, reuse_pretrain: bool = False) -> RunLog:
    """Full sweep: pre-train, fine-tune every method, evaluate, post-hoc, trade-off and tables."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog()
    contexts, posthoc, tradeoff = [], [], []
    for s in selected_seeds(cfg, seed):
        ctx = runlog.cell("pretrain", s, prepare_seed, cfg, s, out, reuse_pretrain)
        if ctx is None:
            continue
        finetune_seed(cfg, ctx, out, runlog)
        evaluate_seed(cfg, ctx, out, runlog)
        if cfg.posthoc is not None:
            posthoc.append(posthoc_seed(cfg, ctx, out, runlog))
        if cfg.tradeoff is not None:
            tradeoff.append(tradeoff_seed(cfg, ctx, out, runlog))
        contexts.append(ctx)
    summary = aggregate(cfg, out, contexts, posthoc, tradeoff) if contexts else {}
    summary["errors"] = len(runlog.errors)
    write_json(out / "sweep_summary.json", summary)
    write_json(out / "errors.json", runlog.errors)
    if contexts:
        write_report(out)
    return runlog
