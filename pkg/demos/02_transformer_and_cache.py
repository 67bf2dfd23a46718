"""The miniature transformer's two modes and what each one exposes.

Run:  python3 demos/02_transformer_and_cache.py
"""

import numpy as np

from kvlatent.data import DataConfig, build_batch, generate_example
from kvlatent.model import ModelConfig, Transformer
from kvlatent.tensor import Tensor, no_grad

cfg = ModelConfig(layers=2, heads=4, kv_groups=2, head_dim=8, mlp_mult=2, max_seq_len=128)
model = Transformer(cfg, seed=0)

examples = [generate_example(i, DataConfig(steps=2, style="eq", seed=0)) for i in range(3)]
for ex in examples:
    print("example:", ex.question, "->", " ".join(ex.steps), "->", ex.answer)
batch = build_batch(examples, max_len=96)

with no_grad():
    record = model.teacher_forward(batch)

print("\nteacher mode (consumes the golden trace):")
print("  logits:", record.logits.shape)
print("  trace cache keys [B, N_C, G, L, d]:", record.cache_keys.shape)
print("  answer->trace attention [B, N_A, N_C, H, L]:", record.attention.shape)
row_sums = record.attention.sum(axis=2)[record.attention_pad_a]
print(f"  attention rows sum to one over real trace cols: {np.allclose(row_sums, 1.0)}")

# Student mode swaps the trace for M continuous latent positions.
m = 8
z = Tensor(np.zeros((batch.size, m, cfg.model_dim), dtype=np.float32))
with no_grad():
    student = model.student_forward(batch, z)
print("\nstudent mode (latent positions instead of the trace):")
print("  latent cache keys [B, M, G, L, d]:", student.latent_keys.shape)
print("  distillation-token hiddens per layer:", len(student.distill_hidden),
      "x", student.distill_hidden[0].shape)

# Both modes share one parameter set: nudging a weight moves both outputs.
with no_grad():
    t0 = model.teacher_forward(batch).logits.data.copy()
    s0 = model.student_forward(batch, z).logits.data.copy()
model.params["layer0.wq"].data = model.params["layer0.wq"].data + 0.05
with no_grad():
    t1 = model.teacher_forward(batch).logits.data
    s1 = model.student_forward(batch, z).logits.data
print("\nself-distillation sanity: one weight nudge moves teacher logits"
      f" ({not np.array_equal(t0, t1)}) and student logits ({not np.array_equal(s0, s1)})")
