"""Finite-difference verification of recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision, tsum, mul


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    failures: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    floor = 1e-3 * max(np.abs(numeric).max(), np.abs(analytic).max()) + 1e-10
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((diff / denom).max())


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
                    seed: int = 0) -> GradCheckReport:
    """Compare backward gradients of ``f(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random weighting so every
    output element contributes. Runs in float64; step ``h = 1e-6 * (1 + |x|)``.
    """
    with precision("float64"):
        leaves = [Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True) for x in inputs]
        out = f(*leaves)
        weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)

        def objective(*args):
            return float(np.sum(f(*args).data * weights))

        backward(tsum(mul(out, Tensor(weights))))
        errors = []
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                h = 1e-6 * (1 + abs(orig))
                flat[j] = orig + h
                plus = objective(*[Tensor(l.data) for l in leaves])
                flat[j] = orig - h
                minus = objective(*[Tensor(l.data) for l in leaves])
                flat[j] = orig
                numeric.reshape(-1)[j] = (plus - minus) / (2 * h)
            errors.append(_relative_error(analytic, numeric))
    failures = [i for i, e in enumerate(errors) if e > tol]
    return GradCheckReport(errors=errors, tol=tol, failures=failures)
