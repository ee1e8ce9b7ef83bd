"""Post-hoc robustness on top of fine-tuning.

WiSE walks the straight line from the zero-shot weights to the fine-tuned
weights. TPGM learns one radius per layer on validation data and projects the
fine-tuned weights into those balls. A greedy soup averages several fine-tuned
runs, keeping each one only if validation accuracy does not drop.

    python demos/03_posthoc.py
"""

from dataclasses import replace

from lipsumlab import BenchmarkSpec, FinetuneConfig, Method, PretrainConfig, contrastive_pretrain, make_benchmark
from lipsumlab import model as M
from lipsumlab.data import energy_token_pool
from lipsumlab.finetune import finetune
from lipsumlab.metrics import accuracy, evaluate
from lipsumlab.posthoc import greedy_ensemble, greedy_soup, tpgm_optimize, tpgm_project, wise

bench = make_benchmark(BenchmarkSpec(seed=2))
pre = contrastive_pretrain(bench, PretrainConfig(seed=2))
zero_shot = M.ParamSet({**pre.vision, M.HEAD_KEY: M.zero_shot_head(pre.text, bench.class_texts)})
pool = energy_token_pool(2, 2000, bench.spec.seq_len, bench.spec.vocab)


def row(label, params):
    rep = evaluate(params, zero_shot, pre.text, bench, pool)
    print(f"{label:<14}{rep.ref_accuracy:8.3f}{rep.shift_accuracy:8.3f}{rep.energy_gap:10.4f}")


for name in ("FT", "LIPSUM"):
    tm = finetune(pre.vision, pre.text, bench, FinetuneConfig(method=Method.parse(name), seed=2))
    print(f"\n{name + ' + WiSE':<14}{'ref':>8}{'shifts':>8}{'gap':>10}")
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        row(f"  lambda={lam:.2f}", wise(zero_shot, tm.params, lam))
    gamma = tpgm_optimize(zero_shot, tm.params, bench.val, reg=0.5)
    row("  TPGM-C(0.5)", tpgm_project(zero_shot, tm.params, gamma))

cands = [finetune(pre.vision, pre.text, bench, FinetuneConfig(lr=lr, steps=steps, seed=2))
         for lr in (5e-4, 1e-3, 2e-3) for steps in (300, 500)]
val = lambda p: accuracy(M.predict_logits(p, bench.val.x), bench.val.label)
print(f"\nbest single candidate, val acc: {max(val(c.params) for c in cands):.3f}")
print(f"greedy soup, val acc:           {val(greedy_soup(cands, bench.val)):.3f}")
ens = greedy_ensemble(cands, bench.val, max_size=4)
print(f"greedy ensemble ({len(ens.members)} members):   {ens.accuracy(bench.val):.3f}")
