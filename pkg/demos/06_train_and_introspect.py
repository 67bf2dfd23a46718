"""A miniature end-to-end run: train briefly, evaluate all three decode modes,
read out the latent trace, and write similarity grids.

Takes a couple of minutes on a laptop core. Run:
    python3 demos/06_train_and_introspect.py [out_dir]
"""

import sys

from kvlatent.data import DataConfig, generate_split
from kvlatent.introspect import decode_latent_trace, kv_similarity, write_similarity_csvs
from kvlatent.model import ModelConfig, load_checkpoint
from kvlatent.trainer import TrainConfig, evaluate_model, train

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"

data_cfg = DataConfig(steps=2, style="eq", operand_hi=6, value_cap=20,
                      train_n=4000, val_n=100, test_n=200, max_len=96, seed=0)
model_cfg = ModelConfig(layers=2, heads=4, kv_groups=2, head_dim=16, mlp_mult=2, max_seq_len=160)
train_cfg = TrainConfig(
    m_latent=8, jacobi_iters=2, batch_size=32, epochs=2, max_steps=150,
    eval_every=50, eval_n=100, lr=3e-3, warmup_steps=10, label="demo",
    final_eval_modes=("latent", "no-cot"),
)

print(f"training {train_cfg.max_steps} steps -> {out}")
result = train(train_cfg, data_cfg, model_cfg, out)
print("final test eval:", result.final_eval)

model, extra = load_checkpoint(f"{out}/checkpoint_final.kvl")
test = generate_split(data_cfg, "test")[:64]
for mode in ("latent", "no-cot", "full-cot"):
    res = evaluate_model(model, test, mode, m_latent=8, jacobi_iters=2,
                         answer_cap=8, full_cot_cap=80)
    print(f"  {mode:<9} acc={res['accuracy']:.3f} mean_passes={res['mean_passes']:.1f}")

question = test[0].question
grid = decode_latent_trace(model, question, k=3, m_latent=8, jacobi_iters=2)
print(f"\nlatent read-out for {question!r} (top-3 per position):")
for pos, entries in enumerate(grid.entries):
    print(f"  z{pos + 1}: " + "  ".join(f"{tok!r}:{logit:.1f}" for tok, logit in entries))

sim = kv_similarity(model, test[0], target="evicted", kind="keys",
                    m_latent=8, jacobi_iters=2, max_len=160)
files = write_similarity_csvs(sim, f"{out}/kv_sim")
print(f"\nwrote {len(files)} similarity grids under {out}/kv_sim")
print("render one with the plots package, e.g.:")
print(f"  python3 -c \"from kvlatent_plots import FigureSpec, render; "
      f"render(FigureSpec(['{out}/kv_sim/keys_evicted_avg.csv'], 'heatmap', '{out}/heatmap.png'))\"")
