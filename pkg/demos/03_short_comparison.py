"""A few hundred steps of byte-level language modelling, plain vs expanded attention.

Both models see the same batches in the same order and are scored on the same
fixed validation batches, so the curves differ only through the attention
layer.  At this length the gap is small and noisy; the acceptance suite runs
the longer three-seed version.

    python demos/03_short_comparison.py [steps]
"""

import sys
import tempfile

from saslab import model as M
from saslab import training as T
from saslab.attention import AttentionConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
corpus = T.stdlib_corpus()
train_cfg = T.TrainConfig(total_steps=steps, batch_size=16, seq_len=64, eval_interval=max(1, steps // 6))

variants = {
    "mha": AttentionConfig(d_model=64, n_heads=2),
    "sas": AttentionConfig(d_model=64, n_heads=2, sim_heads=6, sim_head_dim=48, expand=True),
}
curves = {}
with tempfile.TemporaryDirectory() as tmp:
    for name, att in variants.items():
        cfg = M.ModelConfig(vocab_size=256, n_layers=2, d_model=64, context_len=64, attention=att)
        records = T.train(cfg, train_cfg, None, f"{tmp}/{name}", corpus=corpus)
        curves[name] = [(r.step, r.loss) for r in records if r.split == "val"]

print(f"{'step':>6} " + " ".join(f"{n:>8}" for n in curves))
for i, (step, _) in enumerate(curves["mha"]):
    print(f"{step:>6} " + " ".join(f"{curves[n][i][1]:8.4f}" for n in curves))
