"""Central finite-difference check of autodiff gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Parameter, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    tol: float
    worst: str = ""
    per_param: dict = field(default_factory=dict)

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"max relative error {self.max_rel_error:.3e} over {self.n_checked} entries "
                f"(worst: {self.worst}) tol {self.tol:g} -> {verdict}")


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    # entries where both sides sit below `floor` are compared absolutely
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must read the current values of ``params``;
    entries are perturbed in place and restored afterwards. Only trainable
    parameters are checked. A non-finite loss or gradient counts as failure.

    Central differences carry roundoff of roughly ``ulp(f) / eps``; for losses
    of order 10 an ``eps`` near 1e-4 balances that against truncation error.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.tensor.grad = None
    loss = f()
    backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}

    worst, worst_name, count, ok = 0.0, "", 0, math.isfinite(loss.item())
    per_param = {}
    with no_grad():
        for p in params:
            flat = p.tensor.data.reshape(-1)
            grad = analytic[p.name].reshape(-1)
            p_worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                if not (math.isfinite(numeric) and math.isfinite(grad[i])):
                    ok = False
                    err = math.inf
                else:
                    err = relative_error(float(grad[i]), numeric, floor)
                count += 1
                p_worst = max(p_worst, err)
                if err > worst:
                    worst, worst_name = err, f"{p.name}[{i}]"
            per_param[p.name] = p_worst
    for p in params:
        p.tensor.grad = None
    passed = ok and worst < tol
    return GradCheckReport(worst, count, passed, tol, worst_name, per_param)
