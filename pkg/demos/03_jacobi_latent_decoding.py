"""Jacobi refinement of latent tokens, its sequential fixed point, and the
forward-pass bookkeeping used by the efficiency metric.

Run:  python3 demos/03_jacobi_latent_decoding.py
"""

import numpy as np

from kvlatent.data import DataConfig, build_batch, generate_example
from kvlatent.latent import decode_answer, jacobi_generate, sequential_generate
from kvlatent.model import ModelConfig, Transformer
from kvlatent.tensor import no_grad

model = Transformer(ModelConfig(layers=2, heads=2, kv_groups=2, head_dim=8,
                                mlp_mult=2, precision="f64", max_seq_len=128), seed=3)
batch = build_batch([generate_example(i, DataConfig(steps=2, seed=1)) for i in range(2)], max_len=96)

# T forward passes refine all M positions in parallel...
m = 6
with no_grad():
    for t in (0, 1, 3, m):
        state = jacobi_generate(model, batch, m, t)
        print(f"T={t}: latent passes {state.latent_passes}"
              + ("  (pause-token regime: inputs stay at the learned init)" if t == 0 else ""))

# ...and at T = M the refinement reaches the sequential route exactly.
with no_grad():
    jac = jacobi_generate(model, batch, m, m)
    seq = sequential_generate(model, batch, m)
gap = np.abs(jac.final_inputs.data - seq.final_inputs.data).max()
print(f"\nfixed point: max |jacobi(T=M) - sequential| = {gap:.2e}")

# Answer decoding counts one pass per emitted token plus the T latent passes.
with no_grad():
    state = jacobi_generate(model, batch, m, 3)
    res = decode_answer(model, batch, state, cap=6)
for i in range(batch.size):
    print(f"example {i}: emitted {res.emitted[i]} tokens, passes {res.passes[i]}"
          f" (= T + emitted = {state.latent_passes} + {res.emitted[i]})")
