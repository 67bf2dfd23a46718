"""Miniature decoder-only transformer with explicit KV-cache exposure.

Rotary positions, optional grouped-query attention (kv_groups < heads), a
language-model head, and the trainable latent projection. One parameter set
serves two forward modes: the teacher consumes [Q; C; A] and exposes the
trace cache plus answer-to-trace attention; the student consumes
[Q; <bot>; z_1..z_M; <eot>; "ANS :"; A] where the latent positions carry
continuous embeddings instead of vocabulary rows.

The cache stores post-rotary keys, so eviction and distillation operate on
what attention actually consumes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .data import Batch, Vocab, VOCAB, ANSWER_SCAFFOLD, derive_seed

__all__ = [
    "ModelConfig",
    "Transformer",
    "TeacherRecord",
    "StudentRecord",
    "PrefixState",
    "save_checkpoint",
    "load_checkpoint",
]

MASK_NEG = -1e9  # large enough that exp underflows to exactly 0 after shift


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    kv_groups: int = 2
    head_dim: int = 32
    vocab_size: int = VOCAB.size
    max_seq_len: int = 256
    mlp_mult: int = 4
    use_projection: bool = True
    tie_lm_head: bool = False
    precision: str = "f32"
    rope_base: float = 10000.0
    init_std: float = 0.02

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def validate(self):
        if min(self.layers, self.heads, self.head_dim, self.kv_groups) < 1:
            raise ValueError("layers, heads, head_dim, kv_groups must all be >= 1")
        if self.heads % self.kv_groups != 0:
            raise ValueError("kv_groups must divide heads")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary positions")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class PrefixState:
    """Cache and bookkeeping for a left-padded [bos; Q; (<bot>)] prefix."""

    cache: list  # per layer (k, v) Tensors [B, G, P, d]
    pad_mask: np.ndarray  # [B, P] True where real token
    lengths: np.ndarray  # [B] real prefix length
    last_hidden: Tensor  # [B, D] post-norm hidden at the final prefix column

    @property
    def width(self) -> int:
        return self.pad_mask.shape[1]


@dataclass
class TeacherRecord:
    logits: Tensor  # [B, S, V]
    distill_hidden: list  # per layer Tensor [B, D] at the ':' position
    cache_keys: np.ndarray  # [B, N_C, G, L, d], detached, zero at pads
    cache_values: np.ndarray  # same shape
    cache_pad: np.ndarray  # [B, N_C] True where real trace token
    attention: np.ndarray  # [B, N_A, N_C, H, L]; rows softmaxed over real C
    attention_pad_a: np.ndarray  # [B, N_A] True where real answer token
    batch: Batch


@dataclass
class StudentRecord:
    logits: Tensor  # [B, M+R, V] over the post-prefix segment
    distill_hidden: list  # per layer Tensor [B, D] at the ':' position
    latent_keys: Tensor | None  # [B, M, G, L, d] in-graph (None when M == 0)
    latent_values: Tensor | None
    target_ids: np.ndarray  # [B, M+R] next-token ids for the new segment
    target_mask: np.ndarray  # [B, M+R] True where the target is an answer token
    n_answer: np.ndarray  # [B]
    m_latent: int


def _stack_layers(per_layer, b, m, g, d):
    """[B,M,G,d] per layer -> [B,M,G,L,d] in-graph."""
    reshaped = [t.reshape((b, m, g, 1, d)) for t in per_layer]
    return T.concat(reshaped, axis=3)


def _linear(x: Tensor, w: Tensor) -> Tensor:
    """[..., D_in] @ [D_in, D_out] flattened to one 2-D GEMM."""
    lead = x.shape[:-1]
    n = 1
    for s in lead:
        n *= s
    out = x.reshape((n, x.shape[-1])) @ w
    return out.reshape(lead + (w.shape[-1],))


class Transformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)
        self._build_rope()
        self.forward_count = 0  # total forward invocations, for instrumentation

    # ---- parameters ------------------------------------------------------
    def _init_params(self, seed: int):
        cfg = self.cfg
        rng = np.random.default_rng(derive_seed(seed, "model-init"))
        dt = cfg.dtype
        D, d, H, G, L = cfg.model_dim, cfg.head_dim, cfg.heads, cfg.kv_groups, cfg.layers
        out_scale = 1.0 / np.sqrt(2 * L)

        def normal(shape, scale=1.0):
            return Tensor(
                (rng.standard_normal(shape) * cfg.init_std * scale).astype(dt),
                requires_grad=True,
            )

        self.params["tok_emb"] = normal((cfg.vocab_size, D))
        for l in range(L):
            p = f"layer{l}."
            self.params[p + "ln1_g"] = Tensor(np.ones(D, dtype=dt), requires_grad=True)
            self.params[p + "ln1_b"] = Tensor(np.zeros(D, dtype=dt), requires_grad=True)
            self.params[p + "wq"] = normal((D, H * d))
            self.params[p + "wk"] = normal((D, G * d))
            self.params[p + "wv"] = normal((D, G * d))
            self.params[p + "wo"] = normal((H * d, D), out_scale)
            self.params[p + "ln2_g"] = Tensor(np.ones(D, dtype=dt), requires_grad=True)
            self.params[p + "ln2_b"] = Tensor(np.zeros(D, dtype=dt), requires_grad=True)
            self.params[p + "w_in"] = normal((D, cfg.mlp_mult * D))
            self.params[p + "w_out"] = normal((cfg.mlp_mult * D, D), out_scale)
        self.params["lnf_g"] = Tensor(np.ones(D, dtype=dt), requires_grad=True)
        self.params["lnf_b"] = Tensor(np.zeros(D, dtype=dt), requires_grad=True)
        if not cfg.tie_lm_head:
            self.params["lm_head"] = normal((D, cfg.vocab_size))
        if cfg.use_projection:
            self.params["proj_w"] = normal((D, D))
            self.params["proj_b"] = Tensor(np.zeros(D, dtype=dt), requires_grad=True)
        self.params["latent_init"] = normal((D,))

    def _build_rope(self):
        cfg = self.cfg
        half = cfg.head_dim // 2
        inv_freq = cfg.rope_base ** (-np.arange(half) / half)
        angles = np.arange(cfg.max_seq_len)[:, None] * inv_freq[None, :]
        cos = np.cos(angles).astype(cfg.dtype)
        sin = np.sin(angles).astype(cfg.dtype)
        self.rope_cos = np.concatenate([cos, cos], axis=-1)  # [S_max, d]
        self.rope_sin = np.concatenate([sin, sin], axis=-1)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def set_params(self, arrays: dict[str, np.ndarray]):
        for name, arr in arrays.items():
            self.params[name].data = arr.astype(self.cfg.dtype)

    # ---- core layers -----------------------------------------------------
    def _rope_tables(self, position_ids: np.ndarray):
        # gathered once per forward pass, shared across layers and q/k
        cos = self.rope_cos[position_ids][:, None]  # [B, 1, S, d]
        sin = self.rope_sin[position_ids][:, None]
        return cos, sin

    def run_layers(
        self,
        embeds: Tensor,
        position_ids: np.ndarray,
        mask: np.ndarray,
        past: list | None = None,
        collect_new_kv: bool = False,
        collect_block_outputs: bool = False,
        score_hook=None,
    ):
        """Run the decoder stack over a (possibly cache-extending) segment.

        mask is additive, broadcastable to [B, H, S_new, S_total]. Returns a
        dict with the post-norm hidden state and whatever was collected.
        """
        cfg = self.cfg
        b, s, _ = embeds.shape
        if position_ids.max(initial=0) >= cfg.max_seq_len:
            raise ShapeError(
                f"sequence length {position_ids.max() + 1} exceeds max_seq_len {cfg.max_seq_len}"
            )
        self.forward_count += 1
        rep = cfg.heads // cfg.kv_groups
        scale = 1.0 / np.sqrt(cfg.head_dim)
        cos, sin = self._rope_tables(position_ids)
        x = embeds
        new_kv, block_outputs = [], []
        for l in range(cfg.layers):
            p = f"layer{l}."
            h = T.layer_norm(x, self.params[p + "ln1_g"], self.params[p + "ln1_b"])
            q = _linear(h, self.params[p + "wq"]).reshape((b, s, cfg.heads, cfg.head_dim)).transpose((0, 2, 1, 3))
            k = _linear(h, self.params[p + "wk"]).reshape((b, s, cfg.kv_groups, cfg.head_dim)).transpose((0, 2, 1, 3))
            v = _linear(h, self.params[p + "wv"]).reshape((b, s, cfg.kv_groups, cfg.head_dim)).transpose((0, 2, 1, 3))
            q = T.rope_rotate(q, cos, sin)
            k = T.rope_rotate(k, cos, sin)
            if collect_new_kv:
                new_kv.append((k, v))
            if past is not None:
                pk, pv = past[l]
                k_all = T.concat([pk, k], axis=2)
                v_all = T.concat([pv, v], axis=2)
            else:
                k_all, v_all = k, v
            k_full = T.repeat_heads(k_all, rep, axis=1)
            v_full = T.repeat_heads(v_all, rep, axis=1)
            scores = (q @ k_full.transpose((0, 1, 3, 2))) * scale + mask
            if score_hook is not None:
                score_hook(l, scores.data)
            attn = T.softmax(scores, axis=-1)
            ctx = (attn @ v_full).transpose((0, 2, 1, 3)).reshape((b, s, cfg.model_dim))
            x = x + _linear(ctx, self.params[p + "wo"])
            h2 = T.layer_norm(x, self.params[p + "ln2_g"], self.params[p + "ln2_b"])
            x = x + _linear(T.gelu(_linear(h2, self.params[p + "w_in"])), self.params[p + "w_out"])
            if collect_block_outputs:
                block_outputs.append(x)
        hidden = T.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])
        return {"hidden": hidden, "new_kv": new_kv, "block_outputs": block_outputs}

    def lm_logits(self, hidden: Tensor) -> Tensor:
        if hidden.shape[-1] != self.cfg.model_dim:
            raise ShapeError(
                f"lm head expects feature dim {self.cfg.model_dim}, got {hidden.shape[-1]}"
            )
        if self.cfg.tie_lm_head:
            return _linear(hidden, T.transpose(self.params["tok_emb"], (1, 0)))
        return _linear(hidden, self.params["lm_head"])

    def project_latent(self, hidden: Tensor) -> Tensor:
        """Affine map from hidden state to the next latent input embedding.

        Identity pass-through when the projection is disabled.
        """
        if not self.cfg.use_projection:
            return hidden
        return _linear(hidden, self.params["proj_w"]) + self.params["proj_b"]

    # ---- teacher mode ------------------------------------------------------
    def teacher_forward(self, batch: Batch, capture_attention: bool = True) -> TeacherRecord:
        cfg = self.cfg
        b, s = batch.ids.shape
        if s > cfg.max_seq_len:
            raise ShapeError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
        if (batch.n_c < 1).any():
            raise ValueError("teacher batch has an example with an empty trace segment")

        nc_max = int(batch.n_c.max())
        na_max = int(batch.n_a.max())
        rows = np.arange(b)[:, None]
        # per-example column indices of trace / answer tokens
        c_start = 1 + batch.n_q
        c_idx = np.minimum(c_start[:, None] + np.arange(nc_max)[None, :], s - 1)
        c_valid = np.arange(nc_max)[None, :] < batch.n_c[:, None]
        a_start = c_start + batch.n_c
        a_idx = np.minimum(a_start[:, None] + np.arange(na_max)[None, :], s - 1)
        a_valid = np.arange(na_max)[None, :] < batch.n_a[:, None]

        keys_np = np.zeros((b, nc_max, cfg.kv_groups, cfg.layers, cfg.head_dim), dtype=cfg.dtype)
        vals_np = np.zeros_like(keys_np)
        attn_np = (
            np.zeros((b, na_max, nc_max, cfg.heads, cfg.layers), dtype=cfg.dtype)
            if capture_attention
            else None
        )

        def score_hook(l, scores):
            # scores: [B, H, S, S] detached; restrict to answer rows x trace
            # cols and re-softmax over the real trace positions only.
            if attn_np is None:
                return
            sub = scores[rows[:, :, None], :, a_idx[:, :, None], c_idx[:, None, :]]
            sub = np.where(c_valid[:, None, :, None], sub, MASK_NEG)
            sub = sub - sub.max(axis=2, keepdims=True)
            e = np.exp(sub)
            denom = e.sum(axis=2, keepdims=True)
            prob = e / denom
            prob = np.where(c_valid[:, None, :, None], prob, 0.0)
            prob = np.where(a_valid[:, :, None, None], prob, 0.0)
            attn_np[:, :, :, :, l] = prob

        causal = np.triu(np.full((s, s), MASK_NEG, dtype=cfg.dtype), k=1)[None, None]
        pos = np.broadcast_to(np.arange(s), (b, s))
        out = self.run_layers(
            self.embed_ids(batch.ids),
            pos,
            causal,
            collect_new_kv=True,
            collect_block_outputs=True,
            score_hook=score_hook if capture_attention else None,
        )
        for l, (k, v) in enumerate(out["new_kv"]):
            kd, vd = k.data, v.data  # [B, G, S, d] detached for eviction
            keys_np[:, :, :, l, :] = np.where(
                c_valid[:, :, None, None],
                kd[rows, :, c_idx].reshape(b, nc_max, cfg.kv_groups, cfg.head_dim),
                0.0,
            )
            vals_np[:, :, :, l, :] = np.where(
                c_valid[:, :, None, None],
                vd[rows, :, c_idx].reshape(b, nc_max, cfg.kv_groups, cfg.head_dim),
                0.0,
            )

        distill = []
        didx = batch.distill_idx[:, None, None]
        for blk in out["block_outputs"]:
            g = T.take_along(blk, np.broadcast_to(didx, (b, 1, cfg.model_dim)), axis=1)
            distill.append(g.reshape((b, cfg.model_dim)))

        return TeacherRecord(
            logits=self.lm_logits(out["hidden"]),
            distill_hidden=distill,
            cache_keys=keys_np,
            cache_values=vals_np,
            cache_pad=c_valid,
            attention=attn_np,
            attention_pad_a=a_valid,
            batch=batch,
        )

    # ---- student mode ------------------------------------------------------
    def prefix_forward(self, batch: Batch, include_bot: bool = True) -> PrefixState:
        """Left-padded [bos; Q; (<bot>)] pass that builds the shared prefix cache."""
        cfg = self.cfg
        b = batch.size
        lengths = 1 + batch.n_q + (1 if include_bot else 0)
        p_width = int(lengths.max())
        ids = np.full((b, p_width), Vocab.PAD, dtype=np.int32)
        pad_mask = np.zeros((b, p_width), dtype=bool)
        position_ids = np.zeros((b, p_width), dtype=np.int64)
        for i in range(b):
            n = lengths[i]
            seq = [Vocab.BOS] + list(batch.ids[i, 1 : 1 + batch.n_q[i]])
            if include_bot:
                seq.append(Vocab.BOT)
            ids[i, p_width - n :] = seq
            pad_mask[i, p_width - n :] = True
            position_ids[i, p_width - n :] = np.arange(n)
        mask = self._prefix_mask(pad_mask, p_width)
        out = self.run_layers(self.embed_ids(ids), position_ids, mask, collect_new_kv=True)
        last = out["hidden"][:, p_width - 1, :]
        return PrefixState(cache=out["new_kv"], pad_mask=pad_mask, lengths=lengths, last_hidden=last)

    def _prefix_mask(self, pad_mask: np.ndarray, s: int) -> np.ndarray:
        # causal over the prefix plus masking of left-pad key columns
        causal = np.triu(np.full((s, s), MASK_NEG, dtype=self.cfg.dtype), k=1)[None, None]
        key_pad = np.where(pad_mask[:, None, None, :], 0.0, MASK_NEG).astype(self.cfg.dtype)
        return causal + key_pad

    def _extension_mask(self, prefix: PrefixState, new_len: int) -> np.ndarray:
        b = prefix.pad_mask.shape[0]
        prefix_part = np.where(prefix.pad_mask[:, None, None, :], 0.0, MASK_NEG)
        prefix_part = np.broadcast_to(prefix_part, (b, 1, new_len, prefix.width)).astype(self.cfg.dtype)
        causal = np.triu(np.full((new_len, new_len), MASK_NEG, dtype=self.cfg.dtype), k=1)
        causal = np.broadcast_to(causal[None, None], (b, 1, new_len, new_len))
        return np.concatenate([prefix_part, causal], axis=-1)

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.params["tok_emb"], ids)

    def latent_block_forward(self, prefix: PrefixState, z: Tensor):
        """One pass over the M latent positions against the prefix cache.

        Returns the post-norm hiddens at the latent positions, [B, M, D].
        """
        b, m, dim = z.shape
        if dim != self.cfg.model_dim:
            raise ShapeError(f"latent embedding dim {dim} != model dim {self.cfg.model_dim}")
        position_ids = prefix.lengths[:, None] + np.arange(m)[None, :]
        mask = self._extension_mask(prefix, m)
        out = self.run_layers(z, position_ids, mask, past=prefix.cache)
        return out["hidden"]

    def _suffix_ids(self, batch: Batch):
        """[<eot>; 'ANS :'; answer digits; <eos>] right-padded, plus targets."""
        b = batch.size
        scaffold = VOCAB.encode(ANSWER_SCAFFOLD)
        na_max = int(batch.n_a.max())
        r = 1 + len(scaffold) + na_max
        ids = np.full((b, r), Vocab.PAD, dtype=np.int32)
        answer_mask = np.zeros((b, r), dtype=bool)
        for i in range(b):
            a_start = 1 + batch.n_q[i] + batch.n_c[i]
            answer = list(batch.ids[i, a_start : a_start + batch.n_a[i]])
            seq = [Vocab.EOT] + scaffold + answer
            ids[i, : len(seq)] = seq
            answer_mask[i, 1 + len(scaffold) : len(seq)] = True
        return ids, answer_mask, len(scaffold)

    def student_forward(
        self,
        batch: Batch,
        latent_inputs: Tensor | None,
        prefix: PrefixState | None = None,
    ) -> StudentRecord:
        """Full student pass over [Z; <eot>; scaffold; answer] given the prefix.

        latent_inputs may be None (M = 0), degenerating to [Q; <bot>; <eot>; A].
        """
        cfg = self.cfg
        if prefix is None:
            prefix = self.prefix_forward(batch, include_bot=True)
        b = batch.size
        m = 0 if latent_inputs is None else latent_inputs.shape[1]
        if latent_inputs is not None and latent_inputs.shape[-1] != cfg.model_dim:
            raise ShapeError(
                f"latent embedding dim {latent_inputs.shape[-1]} != model dim {cfg.model_dim}"
            )
        suffix_ids, answer_mask, scaffold_len = self._suffix_ids(batch)
        suffix_emb = self.embed_ids(suffix_ids)
        new_emb = (
            suffix_emb if m == 0 else T.concat([latent_inputs, suffix_emb], axis=1)
        )
        new_len = new_emb.shape[1]
        position_ids = prefix.lengths[:, None] + np.arange(new_len)[None, :]
        mask = self._extension_mask(prefix, new_len)
        out = self.run_layers(
            new_emb,
            position_ids,
            mask,
            past=prefix.cache,
            collect_new_kv=True,
            collect_block_outputs=True,
        )

        latent_k = latent_v = None
        if m > 0:
            ks = [kv[0][:, :, :m, :].transpose((0, 2, 1, 3)) for kv in out["new_kv"]]
            vs = [kv[1][:, :, :m, :].transpose((0, 2, 1, 3)) for kv in out["new_kv"]]
            latent_k = _stack_layers(ks, b, m, cfg.kv_groups, cfg.head_dim)
            latent_v = _stack_layers(vs, b, m, cfg.kv_groups, cfg.head_dim)

        colon_col = m + scaffold_len  # <eot> at m, scaffold ends with ':'
        distill = [blk[:, colon_col, :] for blk in out["block_outputs"]]

        # next-token targets within the new segment
        target_ids = np.full((b, new_len), Vocab.PAD, dtype=np.int32)
        target_mask = np.zeros((b, new_len), dtype=bool)
        target_ids[:, m : new_len - 1] = suffix_ids[:, 1:]
        target_mask[:, m : new_len - 1] = answer_mask[:, 1:]

        return StudentRecord(
            logits=self.lm_logits(out["hidden"]),
            distill_hidden=distill,
            latent_keys=latent_k,
            latent_values=latent_v,
            target_ids=target_ids,
            target_mask=target_mask,
            n_answer=batch.n_a.copy(),
            m_latent=m,
        )


# ---- checkpoint container ----------------------------------------------------

MAGIC = b"KVLT"
VERSION = 1


def save_checkpoint(path, model: Transformer, extra: dict | None = None):
    """Self-describing container: JSON header + named parameter tensors.

    Values are little-endian in the model's precision (32-bit by default;
    the header records the dtype).
    """
    names = sorted(model.params)
    dtype_code = "<f8" if model.cfg.precision == "f64" else "<f4"
    entries, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data.astype(dtype_code))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "dtype": dtype_code,
            "config": asdict(model.cfg),
            "params": entries,
            "extra": extra or {},
        }
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path):
    """Returns (Transformer, extra dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode())
    data = blob[16 + hlen :]
    cfg = ModelConfig(**header["config"])
    model = Transformer(cfg, seed=0)
    for entry in header["params"]:
        arr = np.frombuffer(
            data, dtype=header["dtype"], count=entry["nbytes"] // np.dtype(header["dtype"]).itemsize,
            offset=entry["offset"],
        ).reshape(entry["shape"])
        model.params[entry["name"]].data = arr.astype(cfg.dtype)
    return model, header["extra"]
