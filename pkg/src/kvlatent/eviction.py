"""Training-time compression of the teacher trace cache to M KV pairs.

Per head and layer, each trace position gets a combined score
S = lam * importance + (1 - lam) * redundancy. Importance is the mean
attention that answer queries place on the position (max-pooled over the
query heads sharing a kv group). Redundancy is the softmax-normalized
negative average pairwise cosine similarity among keys: diverse keys score
high and are kept. The top M positions survive, stored in increasing source
order so compressed slot m is temporally monotone.

Everything operates on detached numpy arrays: no gradient flows through
eviction, which only produces stop-gradient targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvictionScores",
    "CompressedCache",
    "redundancy_scores",
    "importance_scores",
    "combine_scores",
    "combine_and_select",
    "crop_baseline",
    "scores_to_json",
]

EPS = 1e-8


@dataclass
class EvictionScores:
    importance: np.ndarray  # [B, N_C, G, L]
    redundancy: np.ndarray  # [B, N_C, G, L], post-softmax
    combined: np.ndarray  # [B, N_C, G, L]
    lam: float
    raw_redundancy: np.ndarray | None = None  # pre-softmax, for inspection


@dataclass
class CompressedCache:
    keys: np.ndarray  # [B, M, G, L, d], zero at deficit slots
    values: np.ndarray  # same shape
    indices: np.ndarray  # [B, M, G, L] source positions, -1 at deficit slots
    valid: np.ndarray  # [B, M] True for real slots
    deficit: np.ndarray  # [B] True when fewer than M real positions existed
    n_c: int  # original (padded) trace length
    m: int


def redundancy_scores(keys: np.ndarray, pad_c: np.ndarray, return_raw: bool = False):
    """keys [B, N_C, G, L, d] with zero rows at pads; pad_c [B, N_C] True=real."""
    b, n_c, g, l, d = keys.shape
    if n_c == 0:
        raise ValueError("redundancy_scores: empty trace")
    kn = keys / (np.linalg.norm(keys, axis=-1, keepdims=True) + EPS)
    cos = np.einsum("bigld,bjgld->bijgl", kn, kn)
    diag = np.arange(n_c)
    cos[:, diag, diag] = 0.0
    n_real = pad_c.sum(axis=1).astype(keys.dtype)  # [B]
    raw = -cos.sum(axis=1) / n_real[:, None, None, None]  # [B, N_C, G, L]
    # softmax over positions including pads, then pads forced to zero
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    r = e / e.sum(axis=1, keepdims=True)
    r = np.where(pad_c[:, :, None, None], r, 0.0)
    return (r, raw) if return_raw else r


def importance_scores(
    attention: np.ndarray,
    pad_c: np.ndarray,
    pad_a: np.ndarray,
    kv_groups: int,
) -> np.ndarray:
    """attention [B, N_A, N_C, H, L] with rows softmaxed over real trace cols.

    With kv_groups < H, attention is max-pooled over each group's query heads
    before aggregation (query head h belongs to group h // (H/G), matching
    the repeat-interleave expansion in the model).
    """
    b, n_a, n_c, h, l = attention.shape
    n_real_a = pad_a.sum(axis=1)
    if (n_real_a == 0).any():
        raise ValueError("importance_scores: an example has zero answer tokens")
    if kv_groups < h:
        rep = h // kv_groups
        attention = attention.reshape(b, n_a, n_c, kv_groups, rep, l).max(axis=4)
    imp = attention.sum(axis=1) / n_real_a[:, None, None, None].astype(attention.dtype)
    return np.where(pad_c[:, :, None, None], imp, 0.0)


def combine_scores(importance, redundancy, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * importance + (1.0 - lam) * redundancy


def _select_top(combined: np.ndarray, pad_c: np.ndarray, m: int):
    """Top-m positions per (example, group, layer); ties go to the lower index.

    Returns indices [B, m, G, L] with n_c as a sentinel at deficit slots
    (sorts last), plus the per-example real count.
    """
    b, n_c, g, l = combined.shape
    masked = np.where(pad_c[:, :, None, None], combined, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")  # stable: lower index wins ties
    top = order[:, :m]  # [B, m, G, L]
    n_real = pad_c.sum(axis=1)  # [B]
    rank_valid = np.arange(m)[None, :] < np.minimum(n_real, m)[:, None]  # [B, m]
    top = np.where(rank_valid[:, :, None, None], top, n_c)
    top = np.sort(top, axis=1)  # increasing source order; sentinels sink to the end
    return top, n_real


def _gather(cache_keys, cache_values, top, n_real, m):
    b, n_c = cache_keys.shape[0], cache_keys.shape[1]
    rank_valid = np.arange(m)[None, :] < np.minimum(n_real, m)[:, None]
    safe = np.minimum(top, n_c - 1)
    keys = np.take_along_axis(cache_keys, safe[..., None], axis=1)
    values = np.take_along_axis(cache_values, safe[..., None], axis=1)
    keep = rank_valid[:, :, None, None, None]
    keys = np.where(keep, keys, 0.0)
    values = np.where(keep, values, 0.0)
    indices = np.where(rank_valid[:, :, None, None], top, -1)
    return CompressedCache(
        keys=keys,
        values=values,
        indices=indices,
        valid=rank_valid,
        deficit=n_real < m,
        n_c=n_c,
        m=m,
    )


def combine_and_select(
    scores: EvictionScores,
    cache_keys: np.ndarray,
    cache_values: np.ndarray,
    pad_c: np.ndarray,
    m: int,
) -> CompressedCache:
    """Pick the M highest-scoring KV pairs per head and layer.

    Padded positions are never selected while enough real candidates exist;
    a shortfall is zero-filled at the tail and flagged (short traces occur in
    training batches).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    top, n_real = _select_top(scores.combined, pad_c, m)
    return _gather(cache_keys, cache_values, top, n_real, m)


def crop_baseline(cache_keys, cache_values, pad_c, m: int) -> CompressedCache:
    """Keep the first M real positions, uniformly across heads and layers."""
    if m < 1:
        raise ValueError("m must be >= 1")
    b, n_c = pad_c.shape
    g, l = cache_keys.shape[2], cache_keys.shape[3]
    n_real = pad_c.sum(axis=1)
    pos = np.broadcast_to(np.arange(m)[None, :], (b, m))
    top = np.where(pos < n_real[:, None], pos, n_c)
    top = np.broadcast_to(top[:, :, None, None], (b, m, g, l)).copy()
    return _gather(cache_keys, cache_values, top, n_real, m)


def scores_to_json(scores: EvictionScores, compressed: CompressedCache | None = None) -> str:
    """Serializable debug dump of scores (and optionally the selection)."""
    payload = {
        "lambda": scores.lam,
        "importance": scores.importance.tolist(),
        "redundancy": scores.redundancy.tolist(),
        "combined": scores.combined.tolist(),
    }
    if compressed is not None:
        payload["selected_indices"] = compressed.indices.tolist()
        payload["deficit"] = compressed.deficit.tolist()
    return json.dumps(payload)


def score_cache(
    cache_keys: np.ndarray,
    attention: np.ndarray,
    pad_c: np.ndarray,
    pad_a: np.ndarray,
    kv_groups: int,
    lam: float,
) -> EvictionScores:
    """Convenience wrapper: redundancy + importance + combination."""
    r, raw = redundancy_scores(cache_keys, pad_c, return_raw=True)
    imp = importance_scores(attention, pad_c, pad_a, kv_groups)
    return EvictionScores(
        importance=imp,
        redundancy=r,
        combined=combine_scores(imp, r, lam),
        lam=lam,
        raw_redundancy=raw,
    )
