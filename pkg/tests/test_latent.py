import numpy as np
import pytest

from conftest import tiny_config

from kvlatent.tensor import no_grad
from kvlatent.data import DataConfig, Vocab, build_batch, generate_example
from kvlatent.latent import (
    decode_answer,
    decode_full_cot,
    extract_full_cot_answer,
    jacobi_generate,
    sequential_generate,
)
from kvlatent.model import Transformer


def make_batch(n=2, steps=2, seed=0):
    cfg = DataConfig(steps=steps, style="eq", seed=seed)
    return build_batch([generate_example(i, cfg) for i in range(n)], max_len=96)


def test_negative_args_rejected():
    model = Transformer(tiny_config(), seed=0)
    batch = make_batch()
    with pytest.raises(ValueError):
        jacobi_generate(model, batch, -1, 2)
    with pytest.raises(ValueError):
        jacobi_generate(model, batch, 2, -1)
    with pytest.raises(ValueError):
        sequential_generate(model, batch, -2)


def test_jacobi_pass_count_independent_of_m():
    model = Transformer(tiny_config(), seed=1)
    batch = make_batch()
    for m in (3, 24):
        before = model.forward_count
        with no_grad():
            state = jacobi_generate(model, batch, m, 3)
        assert state.latent_passes == 3
        # prefix pass + exactly T latent passes
        assert model.forward_count == before + 1 + 3


def test_t_zero_keeps_initialization():
    model = Transformer(tiny_config(), seed=2)
    batch = make_batch()
    with no_grad():
        state = jacobi_generate(model, batch, 4, 0)
    assert state.latent_passes == 0
    init = model.params["latent_init"].data
    for i in range(4):
        np.testing.assert_array_equal(state.final_inputs.data[0, i], init)


def test_m_zero_empty_state():
    model = Transformer(tiny_config(), seed=3)
    batch = make_batch()
    before = model.forward_count
    with no_grad():
        state = jacobi_generate(model, batch, 0, 3)
    assert state.final_inputs is None
    assert state.latent_passes == 0
    assert model.forward_count == before + 1  # prefix only


@pytest.mark.parametrize("m", [1, 2, 4, 8])
def test_jacobi_fixed_point_recovers_sequential(m):
    model = Transformer(tiny_config(), seed=4)
    batch = make_batch(n=2, steps=2, seed=1)
    with no_grad():
        jac = jacobi_generate(model, batch, m, m)
        seq = sequential_generate(model, batch, m)
    diff = np.abs(jac.final_inputs.data - seq.final_inputs.data).max()
    assert diff <= 1e-6, f"M={m}: max diff {diff}"


def test_jacobi_beyond_fixed_point_stable():
    model = Transformer(tiny_config(), seed=5)
    batch = make_batch(n=1, steps=2, seed=2)
    m = 3
    with no_grad():
        a = jacobi_generate(model, batch, m, m)
        b = jacobi_generate(model, batch, m, m + 2)
    np.testing.assert_allclose(a.final_inputs.data, b.final_inputs.data, atol=1e-6)


def test_sequential_m_one_single_extension():
    model = Transformer(tiny_config(), seed=6)
    batch = make_batch(n=1)
    before = model.forward_count
    with no_grad():
        state = sequential_generate(model, batch, 1)
    assert state.latent_passes == 1
    assert model.forward_count == before + 2  # prefix + one extension
    assert state.final_inputs.shape == (1, 1, model.cfg.model_dim)


def test_decode_pass_accounting_matches_analytic():
    model = Transformer(tiny_config(precision="f32"), seed=7)
    batch = make_batch(n=3)
    with no_grad():
        state = jacobi_generate(model, batch, 4, 3)
        res = decode_answer(model, batch, state, cap=6)
    np.testing.assert_array_equal(res.passes, state.latent_passes + res.emitted)
    assert (res.emitted >= 1).all()
    assert (res.emitted <= 6).all()


def test_decode_cap_zero_passes_equal_t():
    model = Transformer(tiny_config(), seed=8)
    batch = make_batch(n=2)
    with no_grad():
        state = jacobi_generate(model, batch, 2, 3)
        res = decode_answer(model, batch, state, cap=0)
    np.testing.assert_array_equal(res.passes, 3)
    assert all(len(a) == 0 for a in res.answer_ids)


def test_decode_truncation_flag():
    model = Transformer(tiny_config(precision="f32"), seed=9)
    batch = make_batch(n=2)
    with no_grad():
        state = jacobi_generate(model, batch, 2, 1)
        res = decode_answer(model, batch, state, cap=2)
    # untrained model essentially never emits <eos> within 2 tokens
    assert res.truncated.dtype == bool
    for e in range(2):
        if res.truncated[e]:
            assert res.emitted[e] == 2


def test_full_cot_pass_accounting():
    model = Transformer(tiny_config(precision="f32"), seed=10)
    batch = make_batch(n=2)
    with no_grad():
        res = decode_full_cot(model, batch, cap=10)
    np.testing.assert_array_equal(res.passes, res.emitted - 1)


def test_extract_full_cot_answer():
    assert extract_full_cot_answer("<<3*4=12>> ANS :12") == "12"
    assert extract_full_cot_answer("no answer marker") == ""
    assert extract_full_cot_answer("ANS :7 junk ANS :9") == "9"


def test_monotone_information_jacobi_update():
    """Iteration t+1 inputs depend only on iteration t hiddens + fixed prefix."""
    model = Transformer(tiny_config(), seed=11)
    batch = make_batch(n=1, steps=2, seed=3)
    m = 3
    with no_grad():
        s1 = jacobi_generate(model, batch, m, 1)
        s2 = jacobi_generate(model, batch, m, 2)
    # first refined inputs agree regardless of how many further rounds run
    np.testing.assert_allclose(
        s1.inputs_per_iteration[1], s2.inputs_per_iteration[1], atol=1e-12
    )
    # and z_1 is already converged after one round
    np.testing.assert_allclose(
        s2.inputs_per_iteration[1][:, 0], s2.inputs_per_iteration[2][:, 0], atol=1e-12
    )
