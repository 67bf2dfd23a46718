"""Finite-difference verification of reverse-mode gradients.

Central differences (f(x+eps) - f(x-eps)) / 2eps, compared element-wise
against the analytic gradient with a relative error whose denominator is
floored at 1e-8. Meant to run at 64-bit precision; 32-bit inputs make the
tolerances meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, forward_backward, no_grad

__all__ = ["GradReport", "grad_check"]

ABS_FLOOR = 1e-8


@dataclass
class GradReport:
    """Outcome of checking one parameter's gradient against central differences."""

    name: str
    max_rel_err: float
    tolerance: float
    passed: bool
    finite: bool = True

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.1e})"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(
    computation,
    inputs: dict[str, Tensor],
    epsilon: float = 1e-4,
    tolerance: float = 1e-4,
    names: list[str] | None = None,
    max_elements_per_param: int | None = None,
    probe_seed: int = 0,
) -> list[GradReport]:
    """Compare analytic gradients of a scalar computation with central differences.

    ``computation`` maps the inputs dict to a scalar Tensor. Every input with
    requires_grad set (restricted to ``names`` when given) is perturbed one
    element at a time; ``max_elements_per_param`` caps the probes per tensor
    with a seeded uniform subsample (small tensors are probed exhaustively).
    Non-finite values flag the report instead of passing silently.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    _, grads = forward_backward(computation, inputs)

    check_names = names if names is not None else list(grads)
    rng = np.random.default_rng(probe_seed)
    reports = []
    for name in check_names:
        param = inputs[name]
        analytic = grads[name]
        flat = param.data.reshape(-1)
        if max_elements_per_param is not None and flat.size > max_elements_per_param:
            probe = np.sort(rng.choice(flat.size, size=max_elements_per_param, replace=False))
        else:
            probe = np.arange(flat.size)
        numeric = np.zeros(len(probe), dtype=param.data.dtype)
        finite = bool(np.isfinite(analytic).all())
        with no_grad():
            for slot, i in enumerate(probe):
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = computation(inputs).item()
                flat[i] = orig - epsilon
                f_minus = computation(inputs).item()
                flat[i] = orig
                numeric[slot] = (f_plus - f_minus) / (2.0 * epsilon)
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    finite = False
        err = _rel_err(analytic.reshape(-1)[probe], numeric)
        passed = finite and err <= tolerance
        reports.append(
            GradReport(
                name=name,
                max_rel_err=err if finite else float("inf"),
                tolerance=tolerance,
                passed=passed,
                finite=finite,
            )
        )
    return reports
