"""Training orchestration: the full distillation step, the loop, evaluation.

One step runs (1) the teacher pass capturing the trace cache, the
answer-to-trace attention and the distillation-token hiddens, (2) eviction to
the compressed target (detached), (3) Jacobi latent generation with gradients
through all iterations, (4) the student pass over the final latent inputs,
(5) the four-term objective, (6) a clipped adaptive-moment update with
decoupled weight decay and a cosine schedule.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, no_grad
from .data import Batch, DataConfig, build_batch, derive_seed, generate_split
from .eviction import combine_and_select, crop_baseline, score_cache
from .latent import decode_answer, decode_full_cot, extract_full_cot_answer, jacobi_generate
from .losses import (
    KVLossConfig,
    LossBreakdown,
    NonFiniteLossError,
    codi_loss,
    kv_loss,
    student_ce,
    teacher_ce,
    total_loss,
)
from .model import ModelConfig, Transformer, load_checkpoint, save_checkpoint

__all__ = [
    "TrainConfig",
    "AdamW",
    "train",
    "train_step",
    "evaluate_model",
    "evaluate_checkpoint",
    "cosine_lr",
    "clip_grad_norm",
]

EVAL_MODES = ("latent", "full-cot", "no-cot")
METRICS_HEADER = ("step", "studentCE", "teacherCE", "codi", "kv", "total", "lr", "val_acc", "fwd_passes")


@dataclass
class TrainConfig:
    m_latent: int = 24
    jacobi_iters: int = 3
    alpha1: float = 10.0
    alpha2: float = 1.0
    eviction_lambda: float = 0.1
    kv_norm: str = "smooth_l1"
    smooth_l1_beta: float = 1.0
    kv_layer_std: bool = True
    codi_layer_std: bool = True
    drop_last_step: bool = True
    eviction: str = "rkv"  # "rkv" | "crop" | "none"
    lr: float = 8e-4
    schedule: str = "cosine"  # "cosine" | "constant"
    weight_decay: float = 0.1
    grad_clip: float = 2.0
    batch_size: int = 128
    epochs: int = 10
    max_steps: int | None = None
    warmup_steps: int = 0
    seed: int = 0
    detach_jacobi: bool = False
    eval_every: int = 100
    eval_n: int = 200
    eval_mode: str = "latent"
    final_eval_modes: tuple = ()
    answer_cap: int = 8
    full_cot_cap: int = 160
    label: str = "run"

    def kv_config(self) -> KVLossConfig:
        return KVLossConfig(self.kv_norm, self.smooth_l1_beta, self.kv_layer_std)

    def validate(self):
        if self.m_latent < 0 or self.jacobi_iters < 0:
            raise ValueError("m_latent and jacobi_iters must be non-negative")
        if not 0.0 <= self.eviction_lambda <= 1.0:
            raise ValueError("eviction_lambda must lie in [0, 1]")
        if self.eviction not in ("rkv", "crop", "none"):
            raise ValueError(f"unknown eviction mode {self.eviction!r}")
        if self.eviction == "none" and self.alpha2 != 0.0:
            raise ValueError("eviction 'none' requires alpha2 == 0")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.kv_config().validate()


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Decay applies to matrix-shaped parameters only, and a parameter whose
    gradient is absent or identically zero is left untouched, so a no-signal
    step is a no-op.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None or not np.any(g):
                continue
            if self.weight_decay and p.data.ndim >= 2:
                p.data = p.data - lr * self.weight_decay * p.data
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cosine_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def compute_losses(model: Transformer, batch: Batch, cfg: TrainConfig):
    """Forward passes and the four terms; returns (total Tensor, LossBreakdown)."""
    want_kv = cfg.alpha2 != 0.0 and cfg.eviction != "none" and cfg.m_latent > 0
    teacher = model.teacher_forward(batch, capture_attention=want_kv and cfg.eviction == "rkv")

    compressed = None
    if want_kv:
        if cfg.eviction == "rkv":
            scores = score_cache(
                teacher.cache_keys,
                teacher.attention,
                teacher.cache_pad,
                teacher.attention_pad_a,
                model.cfg.kv_groups,
                cfg.eviction_lambda,
            )
            compressed = combine_and_select(
                scores, teacher.cache_keys, teacher.cache_values, teacher.cache_pad, cfg.m_latent
            )
        else:
            compressed = crop_baseline(
                teacher.cache_keys, teacher.cache_values, teacher.cache_pad, cfg.m_latent
            )

    state = jacobi_generate(
        model, batch, cfg.m_latent, cfg.jacobi_iters, detach_iterations=cfg.detach_jacobi
    )
    student = model.student_forward(batch, state.final_inputs, prefix=state.prefix)

    s_ce = student_ce(student)
    t_ce = teacher_ce(teacher)
    codi = (
        codi_loss(teacher.distill_hidden, student.distill_hidden, layer_std=cfg.codi_layer_std)
        if cfg.alpha1 != 0.0
        else None
    )
    kv = (
        kv_loss(compressed, student.latent_keys, student.latent_values, cfg.kv_config())
        if compressed is not None
        else None
    )
    return total_loss(s_ce, t_ce, codi, kv, cfg.alpha1, cfg.alpha2)


def train_step(model: Transformer, batch: Batch, cfg: TrainConfig, opt: AdamW, lr: float) -> LossBreakdown:
    model.zero_grad()
    total, breakdown = compute_losses(model, batch, cfg)
    total.backward()
    clip_grad_norm(model.params, cfg.grad_clip)
    opt.step(lr)
    return breakdown


@dataclass
class TrainResult:
    out_dir: str
    steps: int
    best_val_acc: float
    final_val_acc: float
    skipped_steps: int
    final_eval: dict


def _eval_batches(examples, size):
    for i in range(0, len(examples), size):
        yield examples[i : i + size]


def evaluate_model(
    model: Transformer,
    examples,
    mode: str,
    m_latent: int = 24,
    jacobi_iters: int = 3,
    answer_cap: int = 8,
    full_cot_cap: int = 160,
    batch_size: int = 64,
    max_len: int = 256,
):
    """Greedy decoding and exact string match of the numeric answer.

    Returns accuracy, mean forward passes, and the per-example arrays.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}")
    correct, passes, emitted, truncated, golden_nc = [], [], [], [], []
    with no_grad():
        for chunk in _eval_batches(examples, batch_size):
            batch = build_batch(chunk, drop_last_step=False, max_len=max_len)
            if mode == "full-cot":
                res = decode_full_cot(model, batch, cap=full_cot_cap)
                preds = [extract_full_cot_answer(t) for t in res.answer_text]
            else:
                m, t = (m_latent, jacobi_iters) if mode == "latent" else (0, 0)
                state = jacobi_generate(model, batch, m, t)
                res = decode_answer(model, batch, state, cap=answer_cap)
                preds = res.answer_text
            for i, ex in enumerate(batch.examples):
                correct.append(preds[i] == ex.answer)
                passes.append(int(res.passes[i]))
                emitted.append(int(res.emitted[i]))
                truncated.append(bool(res.truncated[i]))
                golden_nc.append(int(batch.n_c[i]))
    correct = np.array(correct)
    passes = np.array(passes)
    return {
        "mode": mode,
        "n": len(correct),
        "accuracy": float(correct.mean()) if len(correct) else 0.0,
        "mean_passes": float(passes.mean()) if len(passes) else 0.0,
        "passes": passes,
        "emitted": np.array(emitted),
        "correct": correct,
        "truncated": np.array(truncated),
        "golden_nc": np.array(golden_nc),
    }


def evaluate_checkpoint(path, examples, mode: str, batch_size: int = 64, max_len: int = 256):
    model, extra = load_checkpoint(path)
    train_cfg = extra.get("train_config", {})
    return evaluate_model(
        model,
        examples,
        mode,
        m_latent=int(train_cfg.get("m_latent", 24)),
        jacobi_iters=int(train_cfg.get("jacobi_iters", 3)),
        answer_cap=int(train_cfg.get("answer_cap", 8)),
        full_cot_cap=int(train_cfg.get("full_cot_cap", 160)),
        batch_size=batch_size,
        max_len=max_len,
    )


def train(
    cfg: TrainConfig,
    data_cfg: DataConfig,
    model_cfg: ModelConfig,
    out_dir: str,
    train_examples=None,
    val_examples=None,
) -> TrainResult:
    """Full training run: cosine decay, periodic validation, best checkpoint."""
    cfg.validate()
    data_cfg.validate()
    model_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(
            {
                "label": cfg.label,
                "seed": cfg.seed,
                "train": asdict(cfg),
                "data": asdict(data_cfg),
                "model": asdict(model_cfg),
            },
            f,
            indent=2,
        )

    if train_examples is None:
        train_examples = generate_split(data_cfg, "train")
    if val_examples is None:
        val_examples = generate_split(data_cfg, "val")
    val_subset = val_examples[: cfg.eval_n]

    model = Transformer(model_cfg, seed=cfg.seed)
    opt = AdamW(model.params, weight_decay=cfg.weight_decay)

    per_epoch = math.ceil(len(train_examples) / cfg.batch_size)
    total_steps = per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics_file = open(metrics_path, "w", newline="")
    writer = csv.writer(metrics_file)
    writer.writerow(METRICS_HEADER)

    best_val, final_val = -1.0, 0.0
    skipped = 0
    step = 0
    stop = False

    def run_validation():
        res = evaluate_model(
            model,
            val_subset,
            cfg.eval_mode,
            m_latent=cfg.m_latent,
            jacobi_iters=cfg.jacobi_iters,
            answer_cap=cfg.answer_cap,
            full_cot_cap=cfg.full_cot_cap,
            max_len=data_cfg.max_len,
        )
        return res["accuracy"], res["mean_passes"]

    try:
        for epoch in range(cfg.epochs):
            if stop:
                break
            order = np.random.default_rng(
                derive_seed(cfg.seed, f"shuffle/{epoch}")
            ).permutation(len(train_examples))
            for start in range(0, len(train_examples), cfg.batch_size):
                if step >= total_steps:
                    stop = True
                    break
                chunk = [train_examples[i] for i in order[start : start + cfg.batch_size]]
                batch = build_batch(chunk, drop_last_step=cfg.drop_last_step, max_len=data_cfg.max_len)
                lr = cosine_lr(cfg, step, total_steps)
                try:
                    breakdown = train_step(model, batch, cfg, opt, lr)
                except NonFiniteLossError as err:
                    skipped += 1
                    writer.writerow([step, "", "", "", "", f"skipped: {err}", lr, "", ""])
                    step += 1
                    continue
                val_acc, fwd = "", ""
                if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                    acc, mean_passes = run_validation()
                    val_acc, fwd = f"{acc:.6f}", f"{mean_passes:.3f}"
                    final_val = acc
                    if acc > best_val:
                        best_val = acc
                        save_checkpoint(
                            os.path.join(out_dir, "checkpoint_best.kvl"),
                            model,
                            extra=_ckpt_extra(cfg, data_cfg, step, acc),
                        )
                writer.writerow(
                    [step, *(f"{v:.8f}" for v in breakdown.csv_values()), f"{lr:.8f}", val_acc, fwd]
                )
                step += 1
        acc, mean_passes = run_validation()
        final_val = acc
        if acc >= best_val:
            best_val = acc
            save_checkpoint(
                os.path.join(out_dir, "checkpoint_best.kvl"),
                model,
                extra=_ckpt_extra(cfg, data_cfg, step, acc),
            )
        save_checkpoint(
            os.path.join(out_dir, "checkpoint_final.kvl"),
            model,
            extra=_ckpt_extra(cfg, data_cfg, step, acc),
        )
    except OSError:
        metrics_file.flush()  # partial metrics survive a failed checkpoint write
        raise
    finally:
        metrics_file.close()

    final_eval = {}
    modes = cfg.final_eval_modes or (cfg.eval_mode,)
    test_examples = generate_split(data_cfg, "test")
    for mode in modes:
        res = evaluate_model(
            model,
            test_examples,
            mode,
            m_latent=cfg.m_latent,
            jacobi_iters=cfg.jacobi_iters,
            answer_cap=cfg.answer_cap,
            full_cot_cap=cfg.full_cot_cap,
            max_len=data_cfg.max_len,
        )
        final_eval[mode] = {
            "accuracy": res["accuracy"],
            "mean_passes": res["mean_passes"],
            "n": res["n"],
        }
    with open(os.path.join(out_dir, "final_eval.json"), "w") as f:
        json.dump(final_eval, f, indent=2)

    return TrainResult(
        out_dir=out_dir,
        steps=step,
        best_val_acc=best_val,
        final_val_acc=final_val,
        skipped_steps=skipped,
        final_eval=final_eval,
    )


def _ckpt_extra(cfg: TrainConfig, data_cfg: DataConfig, step: int, val_acc: float) -> dict:
    return {
        "step": step,
        "val_acc": val_acc,
        "label": cfg.label,
        "seed": cfg.seed,
        "train_config": asdict(cfg),
        "data_config": asdict(data_cfg),
    }
