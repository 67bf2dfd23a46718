"""One training step's objective, term by term, and its ablation toggles.

Run:  python3 demos/05_loss_anatomy.py
"""

from kvlatent.data import DataConfig, build_batch, generate_example
from kvlatent.model import ModelConfig, Transformer
from kvlatent.trainer import TrainConfig, compute_losses

batch = build_batch(
    [generate_example(i, DataConfig(steps=2, seed=2)) for i in range(8)],
    drop_last_step=True,
    max_len=96,
)
model_cfg = ModelConfig(layers=2, heads=2, kv_groups=2, head_dim=8, mlp_mult=2, max_seq_len=128)


def show(name, cfg):
    model = Transformer(model_cfg, seed=5)
    _, bd = compute_losses(model, batch, cfg)
    print(f"{name:<22} studentCE={bd.student_ce:.3f} teacherCE={bd.teacher_ce:.3f} "
          f"codi={bd.codi:.4f} kv={bd.kv:.4f} total={bd.total:.3f}")


base = dict(m_latent=6, jacobi_iters=2, batch_size=8)
show("full objective", TrainConfig(alpha1=10.0, alpha2=1.0, **base))
show("no hidden distill", TrainConfig(alpha1=0.0, alpha2=1.0, **base))
show("no kv distill", TrainConfig(alpha1=10.0, alpha2=0.0, eviction="none", **base))
show("crop eviction", TrainConfig(alpha1=10.0, alpha2=1.0, eviction="crop", **base))
show("l1 kv, no layer std", TrainConfig(alpha1=10.0, alpha2=1.0, kv_norm="l1", kv_layer_std=False, **base))
show("joint-CE baseline", TrainConfig(alpha1=0.0, alpha2=0.0, m_latent=0, jacobi_iters=0,
                                      eviction="none", batch_size=8))
print("\n(total always equals studentCE + teacherCE + a1*codi + a2*kv)")
