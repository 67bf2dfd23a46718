"""Tour of the numeric substrate: reverse-mode gradients and the FD checker.

Run:  python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from kvlatent import tensor as T
from kvlatent.tensor import Tensor, forward_backward, stop_gradient
from kvlatent.gradcheck import grad_check

# A scalar graph: f(x) = x * x has gradient 2x.
x = Tensor(np.float64(3.0), requires_grad=True)
y = x * x
y.backward()
print(f"f(x)=x*x at x=3: value {y.item():.1f}, gradient {float(x.grad):.1f}")

# stop_gradient blocks the path through its argument.
x = Tensor(np.float64(3.0), requires_grad=True)
y = stop_gradient(x) * x
y.backward()
print(f"f(x)=sg(x)*x at x=3: value {y.item():.1f}, gradient {float(x.grad):.1f}  (sg side frozen)")

# forward_backward gives named gradients for a whole parameter dict.
params = {
    "w": Tensor(np.random.default_rng(0).standard_normal((4, 3)), requires_grad=True),
    "b": Tensor(np.zeros(3, dtype=np.float64), requires_grad=True),
}


def loss(inp):
    data = Tensor(np.random.default_rng(1).standard_normal((8, 4)))
    h = data @ inp["w"] + inp["b"]
    return (T.softmax(h, axis=-1) * h).mean()


value, grads = forward_backward(loss, params)
print(f"\nforward_backward: loss {value.item():.4f}, grad shapes",
      {k: v.shape for k, v in grads.items()})

# The checker compares against central differences, element by element.
reports = grad_check(loss, params, epsilon=1e-5, tolerance=1e-6)
for r in reports:
    print(" ", r)
