import numpy as np
import pytest

from kvlatent.data import Batch, DataConfig, SEG_A, SEG_C, SEG_Q, SEG_SPECIAL, Vocab, VOCAB, generate_example, build_batch
from kvlatent.model import ModelConfig, Transformer


def tiny_config(**over):
    base = dict(
        layers=2,
        heads=2,
        kv_groups=2,
        head_dim=8,
        vocab_size=VOCAB.size,
        max_seq_len=128,
        mlp_mult=2,
        precision="f64",
    )
    base.update(over)
    return ModelConfig(**base)


def make_synthetic_batch(n_q, n_c, n_a, b=1, seed=0):
    """Hand-built Batch with arbitrary segment sizes (shape-contract tests)."""
    rng = np.random.default_rng(seed)
    length = 1 + n_q + n_c + n_a
    ids = np.zeros((b, length), dtype=np.int32)
    segments = np.zeros((b, length), dtype=np.int8)
    for i in range(b):
        ids[i, 0] = Vocab.BOS
        ids[i, 1:] = rng.integers(6, VOCAB.size, size=length - 1)
        segments[i, 0] = SEG_SPECIAL
        segments[i, 1 : 1 + n_q] = SEG_Q
        segments[i, 1 + n_q : 1 + n_q + n_c] = SEG_C
        segments[i, 1 + n_q + n_c :] = SEG_A
    return Batch(
        ids=ids,
        segments=segments,
        pad_mask=np.ones((b, length), dtype=bool),
        n_q=np.full(b, n_q),
        n_c=np.full(b, n_c),
        n_a=np.full(b, n_a),
        distill_idx=np.full(b, n_q + n_c),
        examples=[None] * b,
        drop_last_step=False,
    )


@pytest.fixture
def tiny_model():
    return Transformer(tiny_config(), seed=0)


@pytest.fixture
def small_batch():
    cfg = DataConfig(steps=2, style="eq", seed=0)
    return build_batch([generate_example(i, cfg) for i in range(3)], max_len=96)
