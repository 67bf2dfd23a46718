"""The four training terms and their weighted combination.

- student CE: mean token cross-entropy over answer tokens only, per example,
  then averaged over the batch.
- teacher CE: mean over trace and answer positions jointly.
- hidden-distillation term: per-layer L1 between teacher and student hidden
  states at the token preceding the answer, teacher side stop-gradded,
  averaged over the hidden dim and layers.
- KV term: Lp residual between the compressed teacher cache and the student's
  latent cache, keys and values in equal weights, 1/(2M) scaling with the
  per-example effective M when traces run short.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, stop_gradient
from .eviction import CompressedCache
from .model import StudentRecord, TeacherRecord
from .data import SEG_A, SEG_C

__all__ = [
    "KVLossConfig",
    "LossBreakdown",
    "NonFiniteLossError",
    "student_ce",
    "teacher_ce",
    "codi_loss",
    "kv_loss",
    "total_loss",
]

NORM_KINDS = ("l1", "mse", "smooth_l1")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class KVLossConfig:
    norm: str = "smooth_l1"
    smooth_l1_beta: float = 1.0
    layer_std: bool = True

    def validate(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"kv norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")


@dataclass
class LossBreakdown:
    student_ce: float
    teacher_ce: float
    codi: float
    kv: float
    alpha1: float
    alpha2: float
    total: float

    def composed(self) -> float:
        return self.student_ce + self.teacher_ce + self.alpha1 * self.codi + self.alpha2 * self.kv

    CSV_FIELDS = ("studentCE", "teacherCE", "codi", "kv", "total")

    def csv_values(self):
        return (self.student_ce, self.teacher_ce, self.codi, self.kv, self.total)


def _masked_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray, denom: np.ndarray) -> Tensor:
    """Per-example (sum of -log p over masked targets) / denom, batch-averaged."""
    b, s, _ = logits.shape
    logp = T.log_softmax(logits, axis=-1)
    idx = np.clip(targets, 0, logits.shape[-1] - 1)[..., None].astype(np.int64)
    nll = -T.take_along(logp, idx, axis=2).reshape((b, s))
    weights = mask.astype(logits.dtype)
    per_ex = (nll * weights).sum(axis=1) * (1.0 / denom.astype(logits.dtype))
    return per_ex.mean()


def student_ce(record: StudentRecord) -> Tensor:
    """Mean CE over answer tokens only; latent/question positions excluded."""
    if (record.n_answer < 1).any():
        raise ValueError("student_ce: an example has no answer tokens")
    return _masked_ce(record.logits, record.target_ids, record.target_mask, record.n_answer)


def teacher_ce(record: TeacherRecord) -> Tensor:
    """Mean CE over trace and answer positions jointly."""
    batch = record.batch
    if (batch.n_c < 1).any():
        raise ValueError("teacher_ce: an example has an empty trace")
    b, s = batch.ids.shape
    targets = np.zeros((b, s), dtype=np.int64)
    targets[:, :-1] = batch.ids[:, 1:]
    seg_next = np.zeros((b, s), dtype=np.int8)
    seg_next[:, :-1] = batch.segments[:, 1:]
    pad_next = np.zeros((b, s), dtype=bool)
    pad_next[:, :-1] = batch.pad_mask[:, 1:]
    mask = ((seg_next == SEG_C) | (seg_next == SEG_A)) & pad_next
    denom = batch.n_c + batch.n_a
    return _masked_ce(record.logits, targets, mask, denom)


def codi_loss(teacher_hiddens: list, student_hiddens: list, layer_std: bool = False) -> Tensor:
    """(1/L) sum over layers of mean-over-dim |sg(h_t) - h_s|.

    With layer_std the residual of each layer is divided by the detached std
    of that layer's teacher hidden state (+1e-8), the same whitening the KV
    term uses. Training a backbone from scratch grows hidden norms over
    time, and the unnormalized match otherwise comes to dominate the clipped
    gradient budget.
    """
    if len(teacher_hiddens) != len(student_hiddens):
        raise ShapeError(
            f"layer count mismatch: teacher {len(teacher_hiddens)} vs student {len(student_hiddens)}"
        )
    n_layers = len(teacher_hiddens)
    acc = None
    for ht, hs in zip(teacher_hiddens, student_hiddens):
        residual = stop_gradient(ht) - hs
        if layer_std:
            scale = 1.0 / (ht.data.std(axis=-1, keepdims=True) + 1e-8)  # [B, 1], detached
            residual = residual * scale
        term = T.tabs(residual).mean(axis=1)  # [B]
        acc = term if acc is None else acc + term
    return (acc * (1.0 / n_layers)).mean()


def _norm_transform(residual: Tensor, cfg: KVLossConfig) -> Tensor:
    if cfg.norm == "l1":
        return T.tabs(residual)
    if cfg.norm == "mse":
        return residual * residual
    beta = cfg.smooth_l1_beta
    absr = T.tabs(residual)
    quad = (residual * residual) * (0.5 / beta)
    return T.where(absr.data < beta, quad, absr - 0.5 * beta)


def _layer_std(targets: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-example, per-layer std of the compressed teacher targets.

    targets [B, M, G, L, d]; valid [B, M]. Returns [B, L], detached.
    """
    b, m, g, l, d = targets.shape
    w = valid[:, :, None, None, None].astype(targets.dtype)
    cnt = np.maximum(valid.sum(axis=1), 1).astype(targets.dtype) * g * d  # [B]
    s1 = (targets * w).sum(axis=(1, 2, 4))  # [B, L]
    s2 = (targets * targets * w).sum(axis=(1, 2, 4))
    mean = s1 / cnt[:, None]
    var = np.maximum(s2 / cnt[:, None] - mean * mean, 0.0)
    return np.sqrt(var)


def kv_loss(
    compressed: CompressedCache,
    student_keys: Tensor,
    student_values: Tensor,
    cfg: KVLossConfig,
) -> Tensor:
    """Equal-weight key and value residual loss against stop-gradded targets."""
    cfg.validate()
    if student_keys.shape != compressed.keys.shape or student_values.shape != compressed.values.shape:
        raise ShapeError(
            f"kv_loss: student cache {student_keys.shape} vs compressed target "
            f"{compressed.keys.shape}"
        )
    b, m, g, l, d = student_keys.shape
    if m < 1:
        raise ValueError("kv_loss: m must be >= 1 (skip the term when M == 0)")
    valid = compressed.valid  # [B, M]
    keep = valid[:, :, None, None, None].astype(student_keys.dtype)
    m_eff = np.maximum(valid.sum(axis=1), 1).astype(student_keys.dtype)  # [B]

    def side(student, target):
        residual = (student - Tensor(target)) * keep
        if cfg.layer_std:
            inv = 1.0 / (_layer_std(target, valid) + 1e-8)  # [B, L]
            residual = residual * inv[:, None, None, :, None]
        return (_norm_transform(residual, cfg) * keep).sum(axis=(1, 2, 3, 4))

    per_ex = side(student_keys, compressed.keys) + side(student_values, compressed.values)
    scale = 1.0 / (2.0 * m_eff * g * l * d)
    return (per_ex * scale).mean()


def total_loss(
    student: Tensor,
    teacher: Tensor,
    codi: Tensor | None,
    kv: Tensor | None,
    alpha1: float,
    alpha2: float,
):
    """Weighted sum of the four terms; returns (scalar Tensor, LossBreakdown).

    A None term is treated as skipped (logged as 0); a non-finite part aborts
    with a diagnostic naming it.
    """
    parts = {
        "studentCE": student.item(),
        "teacherCE": teacher.item(),
        "codi": 0.0 if codi is None else codi.item(),
        "kv": 0.0 if kv is None else kv.item(),
    }
    for name, value in parts.items():
        if not np.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss part {name}: {value}")
    total = student + teacher
    if codi is not None and alpha1 != 0.0:
        total = total + codi * alpha1
    if kv is not None and alpha2 != 0.0:
        total = total + kv * alpha2
    breakdown = LossBreakdown(
        student_ce=parts["studentCE"],
        teacher_ce=parts["teacherCE"],
        codi=parts["codi"],
        kv=parts["kv"],
        alpha1=alpha1,
        alpha2=alpha2,
        total=total.item(),
    )
    return total, breakdown
