"""Fine-tuning buys reference accuracy at the cost of robustness.

We pre-train a small dual encoder contrastively, read off its zero-shot
classifier, then fine-tune on the reference domain. Accuracy on the reference
test split goes up; accuracy on rotated and shifted domains goes down.

    python demos/01_tradeoff.py
"""

from lipsumlab import BenchmarkSpec, FinetuneConfig, PretrainConfig, contrastive_pretrain, make_benchmark
from lipsumlab import model as M
from lipsumlab.data import energy_token_pool
from lipsumlab.finetune import finetune
from lipsumlab.metrics import evaluate

bench = make_benchmark(BenchmarkSpec(seed=0))
pre = contrastive_pretrain(bench, PretrainConfig(seed=0))
print(f"pre-training InfoNCE: {pre.trace[0]:.3f} -> {pre.trace[-1]:.3f}")

# The zero-shot head is one row per class: the text embedding of its name.
zero_shot = M.ParamSet({**pre.vision, M.HEAD_KEY: M.zero_shot_head(pre.text, bench.class_texts)})
pool = energy_token_pool(0, 2000, bench.spec.seq_len, bench.spec.vocab)

tm = finetune(pre.vision, pre.text, bench, FinetuneConfig(seed=0))
print(f"fine-tuning picked step {tm.selected_step} by validation accuracy\n")

print(f"{'model':<10}" + "".join(f"{d:>9}" for d in ("ref", "shifts", "ECE-ref")))
for name, params in (("zero-shot", zero_shot), ("FT", tm.params)):
    rep = evaluate(params, zero_shot, pre.text, bench, pool)
    print(f"{name:<10}{rep.ref_accuracy:9.3f}{rep.shift_accuracy:9.3f}{rep.ece[0]:9.3f}")
