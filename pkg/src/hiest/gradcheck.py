"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .autodiff import Tensor, no_grad, zero_grad


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max={self.max_error:.3e} tol={self.tolerance:.1e} {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def numerical_gradient(f: Callable[[], Tensor], p: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``p.data`` (mutated in place, restored)."""
    flat = p.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(p.shape)


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Mapping[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() gradients of ``f`` against central differences.

    The error per parameter is ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    named = dict(params) if isinstance(params, Mapping) else {
        (p.name or f"param{i}"): p for i, p in enumerate(params)
    }
    tensors = list(named.values())
    zero_grad(tensors)
    loss = f()
    if loss.requires_grad:
        loss.backward()
    report = GradCheckReport(tolerance=tolerance)
    for name, p in named.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numerical_gradient(f, p, step)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        report.errors[name] = float(rel.max()) if rel.size else 0.0
    zero_grad(tensors)
    return report
