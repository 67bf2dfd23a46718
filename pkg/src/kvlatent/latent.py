"""Generation of the M continuous latent tokens and answer decoding.

Two routes produce the latent inputs. ``jacobi_generate`` refines all M
positions simultaneously for T rounds (one forward pass per round):
position i's next input is the projected hidden state at position i-1 of the
previous round, where position 0 is <bot>. ``sequential_generate`` is the
one-at-a-time route with cache reuse; because position i stabilizes after i
Jacobi rounds, T = M makes the two routes coincide.

Forward-pass accounting: model invocations after the question prefill.
Latent/no-cot decoding costs T + E where E is the number of emitted answer
tokens (the first emission pass consumes the final latent inputs, <eot> and
the "ANS :" scaffold at once). Full-CoT decoding costs E_full - 1 since the
prefill's own logits supply the first trace token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import Batch, Vocab, VOCAB, ANSWER_SCAFFOLD
from .model import PrefixState, Transformer

__all__ = [
    "LatentState",
    "DecodeResult",
    "jacobi_generate",
    "sequential_generate",
    "decode_answer",
    "decode_full_cot",
]


@dataclass
class LatentState:
    inputs_per_iteration: list  # detached [B, M, D] snapshots, index 0 = init
    final_inputs: Tensor | None  # in-graph [B, M, D]; None when M == 0
    iterations: int
    latent_passes: int
    prefix: PrefixState
    m: int


@dataclass
class DecodeResult:
    answer_ids: list  # per example, emitted ids up to (excluding) <eos>
    answer_text: list  # lenient detokenization of answer_ids
    emitted: np.ndarray  # [B] tokens emitted (eos included, pads not)
    passes: np.ndarray  # [B] per-example forward passes (see module docstring)
    truncated: np.ndarray  # [B] cap reached before <eos>
    latent_hidden: np.ndarray | None = None  # [B, M, D] post-norm, first pass


def _broadcast_init(model: Transformer, b: int, m: int) -> Tensor:
    init = model.params["latent_init"].reshape((1, 1, model.cfg.model_dim))
    ones = np.ones((b, m, 1), dtype=model.cfg.dtype)
    return init * ones


def jacobi_generate(
    model: Transformer, batch: Batch, m: int, t: int, detach_iterations: bool = False
) -> LatentState:
    """Refine all M latent inputs simultaneously for T rounds.

    Exactly T forward passes over the latent block; the prefix pass is
    computed once and reused. With T = 0 the inputs stay at the learned
    initialization (pause-token regime). By default gradients flow through
    the whole unrolled chain; ``detach_iterations`` cuts the hidden states
    between rounds so backprop reaches only the final projection and the
    downstream student pass.
    """
    if m < 0 or t < 0:
        raise ValueError("m and t must be non-negative")
    prefix = model.prefix_forward(batch, include_bot=True)
    b = batch.size
    if m == 0:
        return LatentState([], None, t, 0, prefix, 0)
    z = _broadcast_init(model, b, m)
    snapshots = [z.data]
    for _ in range(t):
        h = model.latent_block_forward(prefix, z)  # [B, M, D]
        if m == 1:
            shifted = prefix.last_hidden.reshape((b, 1, model.cfg.model_dim))
        else:
            shifted = T.concat(
                [prefix.last_hidden.reshape((b, 1, model.cfg.model_dim)), h[:, : m - 1, :]],
                axis=1,
            )
        if detach_iterations:
            shifted = T.stop_gradient(shifted)
        z = model.project_latent(shifted)
        snapshots.append(z.data)
    return LatentState(snapshots, z, t, t, prefix, m)


def sequential_generate(model: Transformer, batch: Batch, m: int) -> LatentState:
    """One latent at a time with cache reuse; M forward passes."""
    if m < 0:
        raise ValueError("m must be non-negative")
    prefix = model.prefix_forward(batch, include_bot=True)
    b, dim = batch.size, model.cfg.model_dim
    if m == 0:
        return LatentState([], None, 0, 0, prefix, 0)
    past = list(prefix.cache)
    pad_cols = [np.where(prefix.pad_mask[:, None, None, :], 0.0, -1e9).astype(model.cfg.dtype)]
    hidden = prefix.last_hidden
    zs = []
    for i in range(m):
        z_i = model.project_latent(hidden.reshape((b, 1, dim)))
        zs.append(z_i)
        position_ids = (prefix.lengths + i)[:, None]
        mask = np.concatenate(
            pad_cols + [np.zeros((b, 1, 1, i + 1), dtype=model.cfg.dtype)], axis=-1
        )
        out = model.run_layers(z_i, position_ids, mask, past=past, collect_new_kv=True)
        past = [
            (T.concat([pk, nk], axis=2), T.concat([pv, nv], axis=2))
            for (pk, pv), (nk, nv) in zip(past, out["new_kv"])
        ]
        hidden = out["hidden"][:, 0, :]
    final = zs[0] if m == 1 else T.concat(zs, axis=1)
    return LatentState([final.data], final, m, m, prefix, m)


def _scaffold_ids(b: int) -> np.ndarray:
    ids = [Vocab.EOT] + VOCAB.encode(ANSWER_SCAFFOLD)
    return np.tile(np.array(ids, dtype=np.int32), (b, 1))


def decode_answer(
    model: Transformer,
    batch: Batch,
    state: LatentState,
    cap: int = 8,
    capture_latent_hidden: bool = False,
) -> DecodeResult:
    """Greedy answer decoding from a finalized latent state.

    Appends <eot> plus the deterministic "ANS :" scaffold in one pass that
    also consumes the final latent inputs, then extends one token at a time
    until <eos> or the length cap. Per-example pass counts follow the
    analytic formula T + emitted.
    """
    b = batch.size
    prefix = state.prefix
    m = state.m
    emitted = np.zeros(b, dtype=np.int64)
    passes = np.full(b, state.latent_passes, dtype=np.int64)
    answers = [[] for _ in range(b)]
    truncated = np.zeros(b, dtype=bool)
    latent_hidden = None
    if cap < 1:
        return DecodeResult(answers, ["" for _ in range(b)], emitted, passes, truncated, None)

    scaffold = _scaffold_ids(b)
    scaffold_emb = model.embed_ids(scaffold)
    new_emb = (
        scaffold_emb
        if state.final_inputs is None
        else T.concat([state.final_inputs, scaffold_emb], axis=1)
    )
    new_len = new_emb.shape[1]
    position_ids = prefix.lengths[:, None] + np.arange(new_len)[None, :]
    mask = model._extension_mask(prefix, new_len)
    out = model.run_layers(new_emb, position_ids, mask, past=prefix.cache, collect_new_kv=True)
    if capture_latent_hidden and m > 0:
        latent_hidden = out["hidden"].data[:, :m, :].copy()
    past = [
        (T.concat([pk, nk], axis=2), T.concat([pv, nv], axis=2))
        for (pk, pv), (nk, nv) in zip(prefix.cache, out["new_kv"])
    ]
    logits = model.lm_logits(out["hidden"][:, new_len - 1, :]).data
    next_tok = logits.argmax(axis=-1).astype(np.int32)
    active = np.ones(b, dtype=bool)
    passes += 1  # the pass that consumed [Z; <eot>; scaffold] and emitted token 1
    emitted += 1
    done = next_tok == Vocab.EOS
    for e in range(b):
        if not done[e]:
            answers[e].append(int(next_tok[e]))
    active &= ~done
    total_cols = prefix.width + new_len
    pad_part = np.where(prefix.pad_mask[:, None, None, :], 0.0, -1e9).astype(model.cfg.dtype)

    step = 1
    while active.any() and step < cap:
        emb = model.embed_ids(next_tok[:, None])
        position_ids = (prefix.lengths + new_len + step - 1)[:, None]
        mask = np.concatenate(
            [pad_part, np.zeros((b, 1, 1, total_cols - prefix.width + 1), dtype=model.cfg.dtype)],
            axis=-1,
        )
        out = model.run_layers(emb, position_ids, mask, past=past, collect_new_kv=True)
        past = [
            (T.concat([pk, nk], axis=2), T.concat([pv, nv], axis=2))
            for (pk, pv), (nk, nv) in zip(past, out["new_kv"])
        ]
        total_cols += 1
        logits = model.lm_logits(out["hidden"][:, 0, :]).data
        new_tok = logits.argmax(axis=-1).astype(np.int32)
        # frozen examples keep feeding their last token; outputs are ignored
        next_tok = np.where(active, new_tok, next_tok).astype(np.int32)
        passes += active
        emitted += active
        finished = active & (new_tok == Vocab.EOS)
        for e in range(b):
            if active[e] and not finished[e]:
                answers[e].append(int(new_tok[e]))
        active &= ~finished
        step += 1
    truncated = active.copy()
    texts = [_lenient_text(ids) for ids in answers]
    return DecodeResult(answers, texts, emitted, passes, truncated, latent_hidden)


def decode_full_cot(model: Transformer, batch: Batch, cap: int = 160) -> DecodeResult:
    """Greedy decoding of the full trace plus answer from [bos; Q].

    The prefill's logits supply the first token, so per-example passes are
    emitted - 1.
    """
    b = batch.size
    prefix = model.prefix_forward(batch, include_bot=False)
    emitted = np.zeros(b, dtype=np.int64)
    passes = np.zeros(b, dtype=np.int64)
    outputs = [[] for _ in range(b)]
    if cap < 1:
        return DecodeResult(outputs, ["" for _ in range(b)], emitted, passes, np.zeros(b, bool))
    logits = model.lm_logits(prefix.last_hidden).data
    next_tok = logits.argmax(axis=-1).astype(np.int32)
    active = np.ones(b, dtype=bool)
    emitted += 1  # token 1 from the prefill pass (not counted as an extension)
    done = next_tok == Vocab.EOS
    for e in range(b):
        if not done[e]:
            outputs[e].append(int(next_tok[e]))
    active &= ~done
    past = list(prefix.cache)
    pad_part = np.where(prefix.pad_mask[:, None, None, :], 0.0, -1e9).astype(model.cfg.dtype)
    new_cols = 0
    while active.any() and new_cols < cap - 1:
        emb = model.embed_ids(next_tok[:, None])
        position_ids = (prefix.lengths + new_cols)[:, None]
        mask = np.concatenate(
            [pad_part, np.zeros((b, 1, 1, new_cols + 1), dtype=model.cfg.dtype)], axis=-1
        )
        out = model.run_layers(emb, position_ids, mask, past=past, collect_new_kv=True)
        past = [
            (T.concat([pk, nk], axis=2), T.concat([pv, nv], axis=2))
            for (pk, pv), (nk, nv) in zip(past, out["new_kv"])
        ]
        new_cols += 1
        logits = model.lm_logits(out["hidden"][:, 0, :]).data
        new_tok = logits.argmax(axis=-1).astype(np.int32)
        next_tok = np.where(active, new_tok, next_tok).astype(np.int32)
        passes += active
        emitted += active
        finished = active & (new_tok == Vocab.EOS)
        for e in range(b):
            if active[e] and not finished[e]:
                outputs[e].append(int(new_tok[e]))
        active &= ~finished
    truncated = active.copy()
    texts = [_lenient_text(ids) for ids in outputs]
    return DecodeResult(outputs, texts, emitted, passes, truncated)


_ANS_RE = re.compile(r"ANS :([0-9]+)")


def _lenient_text(ids) -> str:
    return "".join(VOCAB.id_to_token[int(i)] for i in ids)


def extract_full_cot_answer(text: str) -> str:
    """Pull the numeric answer out of a generated trace, empty if absent."""
    matches = _ANS_RE.findall(text)
    return matches[-1] if matches else ""
