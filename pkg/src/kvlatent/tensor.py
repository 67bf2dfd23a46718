"""Reverse-mode autodiff over dense numpy arrays.

Small tape-based engine sized for a miniature transformer: define-by-run,
scalar backward roots, broadcasting binary ops, and fused primitives for the
hot spots (softmax, layer norm, rotary rotation, gelu). Evaluation is
deterministic for fixed inputs: reductions use numpy's fixed axis order and
no op is threaded internally.

Graphs are single-threaded by contract; independent graphs may live on
separate threads since there is no shared mutable state between them.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "stop_gradient",
    "forward_backward",
]


class ShapeError(ValueError):
    """Raised when an operation's inputs have incompatible shapes."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (pure forward eval)."""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self.prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    """Tape record: parent tensors plus a backward closure."""

    __slots__ = ("parents", "bwd", "name")

    def __init__(self, parents, bwd, name):
        self.parents = parents
        self.bwd = bwd
        self.name = name


def _as_array(x, like: np.ndarray | None = None):
    if isinstance(x, np.ndarray):
        return x
    dtype = like.dtype if like is not None else np.float32
    return np.asarray(x, dtype=dtype)


class Tensor:
    """A dense array with an optional gradient and tape linkage.

    The gradient, when present, always has the same shape as the value.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.generic):
            data = np.asarray(data)  # numpy scalar: keep its dtype
        elif not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: _Node | None = None

    # ---- basic introspection -------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Value-sharing view with no tape linkage (bit-identical data)."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # ---- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # ---- backward --------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            node = t.node
            if node is None:
                continue
            grads = node.bwd(t.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not _wants_grad(parent):
                    continue
                if g.shape != parent.data.shape:
                    raise ShapeError(
                        f"{node.name}: gradient shape {g.shape} does not match "
                        f"value shape {parent.data.shape}"
                    )
                if parent.grad is None:
                    # Safe to alias: accumulation below always rebinds, never
                    # mutates in place.
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen and (p.node is not None or p.requires_grad):
                    stack.append((p, False))
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = like.data if like is not None else None
    return Tensor(_as_array(x, arr))


def _make(data: np.ndarray, parents, bwd, name: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_wants_grad(p) for p in parents):
        out.node = _Node(tuple(parents), bwd, name)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- arithmetic ------------------------------------------------------------

def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bwd, "div")


def neg(a):
    a = _lift(a)

    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


def pow_scalar(a, p):
    a = _lift(a)
    p = float(p)

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), bwd, "pow")


def texp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (a,), bwd, "exp")


def tlog(a):
    a = _lift(a)

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd, "log")


def tsqrt(a):
    a = _lift(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out_data),)

    return _make(out_data, (a,), bwd, "sqrt")


def ttanh(a):
    a = _lift(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), bwd, "tanh")


def tabs(a):
    a = _lift(a)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bwd, "abs")


def where(cond: np.ndarray, a, b):
    """Select between two tensors with a constant boolean mask."""
    a, b = _lift(a), _lift(b)

    def bwd(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return _make(np.where(cond, a.data, b.data), (a, b), bwd, "where")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Tanh-approximated gelu, fused forward and backward."""
    a = _lift(a)
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    t = np.tanh(inner)

    def bwd(g):
        # d/dx [0.5 x (1 + t)] = 0.5(1 + t) + 0.5 x (1 - t^2) * inner'(x)
        dinner = x2 * (3 * 0.044715)
        dinner += 1.0
        dinner *= _GELU_C
        u = t * t
        np.subtract(1.0, u, out=u)
        u *= dinner
        u *= x
        u += 1.0 + t
        u *= 0.5
        u *= g
        return (u,)

    return _make(0.5 * x * (1.0 + t), (a,), bwd, "gelu")


# ---- structural ------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def reshape(a, shape):
    a = _lift(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bwd, "transpose")


def getitem(a, key):
    a = _lift(a)
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _make(a.data[key], (a,), bwd, "getitem")


def concat(tensors, axis: int):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat"
    )


def repeat_heads(a, repeats: int, axis: int):
    """repeat_interleave along ``axis``; backward sums each repeated group."""
    a = _lift(a)
    if repeats == 1:
        return a
    n = a.shape[axis]

    def bwd(g):
        gs = g.reshape(g.shape[:axis] + (n, repeats) + g.shape[axis + 1 :])
        return (gs.sum(axis=axis + 1),)

    return _make(np.repeat(a.data, repeats, axis=axis), (a,), bwd, "repeat_heads")


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take_along(a, indices: np.ndarray, axis: int):
    """Gather along an axis with constant integer indices (scatter-add backward)."""
    a = _lift(a)
    shape, dtype = a.shape, a.dtype
    idx = indices

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        grids = list(np.indices(g.shape, sparse=False))
        grids[axis] = np.broadcast_to(idx, g.shape)
        np.add.at(full, tuple(grids), g)
        return (full,)

    return _make(np.take_along_axis(a.data, idx, axis=axis), (a,), bwd, "take_along")


def embedding(table, ids: np.ndarray):
    """Row lookup into an embedding table; ids is a constant integer array."""
    table = _lift(table)
    vocab, dim = table.shape
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= vocab:
        raise ShapeError(f"embedding: id out of range for table of {vocab} rows")

    def bwd(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, dim)
        if vocab <= 1024:
            # scatter-add as a one-hot GEMM: far faster than np.add.at
            onehot = np.zeros((vocab, flat_ids.size), dtype=table.dtype)
            onehot[flat_ids, np.arange(flat_ids.size)] = 1.0
            return (onehot @ flat_g,)
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, flat_ids, flat_g)
        return (full,)

    return _make(table.data[ids], (table,), bwd, "embedding")


def stop_gradient(a) -> Tensor:
    """Identity on the value; blocks all gradient flow (shares the array)."""
    a = _lift(a)
    return Tensor(a.data, requires_grad=False)


# ---- fused neural primitives ----------------------------------------------

def softmax(a, axis: int = -1):
    a = _lift(a)
    x = a.data
    x_shift = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x_shift)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), bwd, "softmax")


def log_softmax(a, axis: int = -1):
    a = _lift(a)
    x = a.data
    x_shift = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x_shift).sum(axis=axis, keepdims=True))
    z = x_shift - lse

    def bwd(g):
        return (g - np.exp(z) * g.sum(axis=axis, keepdims=True),)

    return _make(z, (a,), bwd, "log_softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5):
    """Normalization over the last axis with learned gain and bias."""
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias shape {gain.shape}/{bias.shape} does not match "
            f"feature dim {a.shape[-1]}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        n = x.shape[-1]
        dxhat = g * gain.data
        dvar_term = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dmu_term = dxhat.mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - dmu_term - xhat * dvar_term)
        axes = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gain.data + bias.data, (a, gain, bias), bwd, "layer_norm")


def rope_rotate(a, cos: np.ndarray, sin: np.ndarray):
    """Rotary position rotation: a*cos + rotate_half(a)*sin.

    cos/sin are constant arrays broadcastable to ``a`` with the two half-dim
    blocks duplicated, i.e. cos = [c, c] and sin = [s, s] along the last axis.
    """
    a = _lift(a)
    x = a.data
    half = x.shape[-1] // 2

    def rot(v):  # [x1, x2] -> [-x2, x1]
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    def rot_t(v):  # transpose of rot: [g1, g2] -> [g2, -g1]
        return np.concatenate([v[..., half:], -v[..., :half]], axis=-1)

    def bwd(g):
        return (g * cos + rot_t(g * sin),)

    return _make(x * cos + rot(x) * sin, (a,), bwd, "rope_rotate")


# ---- harness ----------------------------------------------------------------

def forward_backward(computation, inputs: dict[str, Tensor]):
    """Evaluate ``computation(inputs)`` and return (value, gradients by name).

    The computation must return a scalar Tensor; gradients are exact
    reverse-mode derivatives with respect to every input tensor that has
    requires_grad set.
    """
    for t in inputs.values():
        t.grad = None
    value = computation(inputs)
    if not isinstance(value, Tensor):
        raise TypeError("computation must return a Tensor")
    value.backward()
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in inputs.items()
        if t.requires_grad
    }
    return value, grads
