import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvlatent import tensor as T
from kvlatent.tensor import Tensor, ShapeError, forward_backward, no_grad, stop_gradient
from kvlatent.gradcheck import grad_check


def t64(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_square_gradient():
    x = t64(3.0)
    y = x * x
    y.backward()
    assert y.item() == 9.0
    assert x.grad == pytest.approx(6.0)


def test_stop_gradient_blocks_flow():
    x = t64(3.0)
    y = stop_gradient(x) * x
    y.backward()
    assert y.item() == 9.0
    assert x.grad == pytest.approx(3.0)


def test_stop_gradient_value_bit_identical():
    x = t64(np.random.default_rng(0).standard_normal((4, 5)))
    y = stop_gradient(x)
    assert y.data is x.data
    assert not y.requires_grad


def test_non_scalar_backward_rejected():
    x = t64(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_matmul_shape_mismatch_names_op():
    a = t64(np.ones((2, 3)))
    b = t64(np.ones((4, 2)))
    with pytest.raises(ShapeError, match="matmul"):
        a @ b


def test_softmax_cross_entropy_matches_finite_differences():
    logits = t64(np.array([1.0, 0.0, 0.0]))

    def comp(inp):
        logp = T.log_softmax(inp["logits"].reshape(1, 3), axis=-1)
        return -logp[0, 0]

    reports = grad_check(comp, {"logits": logits}, epsilon=1e-5, tolerance=1e-6)
    assert all(r.passed for r in reports)


def test_grad_check_linear_map_exact():
    w = t64(np.random.default_rng(1).standard_normal((3, 2)))

    def comp(inp):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        return (x @ inp["w"]).sum()

    reports = grad_check(comp, {"w": w}, epsilon=1e-4, tolerance=1e-7)
    assert all(r.passed for r in reports)
    assert max(r.max_rel_err for r in reports) < 1e-7


def test_grad_check_constant_function_zero():
    x = t64(np.ones(4))

    def comp(inp):
        return (inp["x"] * 0.0).sum()

    (report,) = grad_check(comp, {"x": x})
    assert report.passed
    assert report.max_rel_err == 0.0


def test_grad_check_flags_non_finite():
    x = t64(np.array([0.0]))

    def comp(inp):
        return T.tlog(inp["x"]).sum()

    (report,) = grad_check(comp, {"x": x})
    assert not report.passed
    assert not report.finite


def test_forward_backward_returns_named_grads():
    a, b = t64(2.0), t64(5.0)
    value, grads = forward_backward(lambda i: i["a"] * i["b"] + i["a"], {"a": a, "b": b})
    assert value.item() == 12.0
    assert grads["a"] == pytest.approx(6.0)
    assert grads["b"] == pytest.approx(2.0)


def test_no_grad_skips_tape():
    x = t64(2.0)
    with no_grad():
        y = x * x
    assert y.node is None


PRIMITIVES = {
    "exp": lambda x: T.texp(x).sum(),
    "log": lambda x: T.tlog(x * x + 1.0).sum(),
    "tanh": lambda x: T.ttanh(x).sum(),
    "sqrt": lambda x: T.tsqrt(x * x + 0.5).sum(),
    "abs": lambda x: T.tabs(x + 0.3).sum(),
    "gelu": lambda x: T.gelu(x).sum(),
    "softmax": lambda x: (T.softmax(x, axis=-1) * T.softmax(x, axis=-1)).sum(),
    "log_softmax": lambda x: (T.log_softmax(x, axis=-1) * 0.5).sum(),
    "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
    "div": lambda x: (1.0 / (x * x + 2.0)).sum(),
    "mean": lambda x: (x.mean(axis=1) * 3.0).sum(),
    "getitem": lambda x: (x[1:, :2] * 2.0).sum(),
    "transpose": lambda x: (x.transpose((1, 0)) @ x).sum(),
    "where": lambda x: T.where(x.data > 0, x * 2.0, x * -1.0).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = t64(rng.standard_normal((3, 4)))
    fn = PRIMITIVES[name]
    reports = grad_check(lambda i: fn(i["x"]), {"x": x}, epsilon=1e-5, tolerance=1e-4)
    assert all(r.passed for r in reports), reports


def test_matmul_batched_gradient():
    rng = np.random.default_rng(7)
    a = t64(rng.standard_normal((2, 3, 4)))
    b = t64(rng.standard_normal((4, 5)))

    def comp(inp):
        return ((inp["a"] @ inp["b"]) ** 2.0).sum()

    reports = grad_check(comp, {"a": a, "b": b}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_layer_norm_gradient():
    rng = np.random.default_rng(11)
    x = t64(rng.standard_normal((2, 5, 6)))
    g = t64(rng.standard_normal(6))
    b = t64(rng.standard_normal(6))

    def comp(inp):
        return (T.layer_norm(inp["x"], inp["g"], inp["b"]) ** 2.0).sum()

    reports = grad_check(comp, {"x": x, "g": g, "b": b}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_embedding_gradient_scatter():
    table = t64(np.random.default_rng(3).standard_normal((7, 4)))
    ids = np.array([[0, 2, 2], [6, 0, 1]])

    def comp(inp):
        return (T.embedding(inp["t"], ids) ** 2.0).sum()

    reports = grad_check(comp, {"t": table}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_take_along_gradient():
    rng = np.random.default_rng(5)
    x = t64(rng.standard_normal((2, 4, 3)))
    idx = np.array([[[1, 0, 2]], [[3, 3, 0]]])  # gather along axis 1

    def comp(inp):
        return (T.take_along(inp["x"], idx, axis=1) * 2.0).sum()

    reports = grad_check(comp, {"x": x}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_concat_and_repeat_heads_gradient():
    rng = np.random.default_rng(9)
    a = t64(rng.standard_normal((2, 2, 3)))
    b = t64(rng.standard_normal((2, 1, 3)))

    def comp(inp):
        cat = T.concat([inp["a"], inp["b"]], axis=1)
        rep = T.repeat_heads(cat, 2, axis=1)
        return (rep * rep).sum()

    reports = grad_check(comp, {"a": a, "b": b}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_rope_rotate_gradient_and_norm_preservation():
    rng = np.random.default_rng(13)
    x = t64(rng.standard_normal((2, 3, 8)))
    theta = rng.standard_normal((1, 3, 4))
    cos = np.concatenate([np.cos(theta)] * 2, axis=-1)
    sin = np.concatenate([np.sin(theta)] * 2, axis=-1)

    y = T.rope_rotate(x, cos, sin)
    # rotation preserves the per-pair norms
    xn = x.data[..., :4] ** 2 + x.data[..., 4:] ** 2
    yn = y.data[..., :4] ** 2 + y.data[..., 4:] ** 2
    np.testing.assert_allclose(xn, yn, atol=1e-12)

    def comp(inp):
        return (T.rope_rotate(inp["x"], cos, sin) ** 2.0).sum()

    reports = grad_check(comp, {"x": x}, epsilon=1e-5, tolerance=1e-5)
    assert all(r.passed for r in reports)


def test_two_layer_attention_block_finite_differences():
    """A miniature attention stack checked end to end against central differences."""
    rng = np.random.default_rng(17)
    dim, seq = 6, 4
    params = {
        "wq": t64(rng.standard_normal((dim, dim)) * 0.5),
        "wk": t64(rng.standard_normal((dim, dim)) * 0.5),
        "wv": t64(rng.standard_normal((dim, dim)) * 0.5),
        "g": t64(np.ones(dim)),
        "b": t64(np.zeros(dim)),
    }
    x_const = rng.standard_normal((1, seq, dim))
    causal = np.triu(np.full((seq, seq), -1e9), k=1)[None]

    def block(x, inp):
        h = T.layer_norm(x, inp["g"], inp["b"])
        q, k, v = h @ inp["wq"], h @ inp["wk"], h @ inp["wv"]
        scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(dim)) + causal
        return x + T.softmax(scores, axis=-1) @ v

    def comp(inp):
        x = Tensor(x_const)
        x = block(x, inp)
        x = block(x, inp)
        return (x * x).mean()

    reports = grad_check(comp, params, epsilon=1e-4, tolerance=1e-4)
    assert all(r.passed for r in reports), [str(r) for r in reports]


def test_determinism_bitwise():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((8, 8)).astype(np.float32)

    def run():
        a = Tensor(x, requires_grad=True)
        y = (T.softmax(a @ a, axis=-1) * a).sum()
        y.backward()
        return y.data.copy(), a.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        grad_check(lambda i: i["x"].sum(), {"x": t64(np.ones(2))}, epsilon=0.0)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=6),
    st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=6),
)
def test_unbroadcast_addition_grads_sum_correctly(row, col):
    a = t64(np.asarray(row, dtype=np.float64).reshape(1, -1))
    b = t64(np.asarray(col, dtype=np.float64).reshape(-1, 1))
    out = (a + b).sum()
    out.backward()
    assert a.grad.shape == a.shape
    assert b.grad.shape == b.shape
    np.testing.assert_allclose(a.grad, np.full(a.shape, len(col)))
    np.testing.assert_allclose(b.grad, np.full(b.shape, len(row)))
