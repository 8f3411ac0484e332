"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, precision, record_pool_choices


@dataclass
class GradCheckResult:
    checked: int = 0
    kinks: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def merge(self, other: "GradCheckResult") -> None:
        self.checked += other.checked
        self.kinks += other.kinks
        self.max_rel_error = max(self.max_rel_error, other.max_rel_error)
        self.failures.extend(other.failures)


def _same_choices(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-3,
                    rtol: float = 1e-2, floor: float = 1e-6, max_coords: int | None = None,
                    rng: np.random.Generator | None = None,
                    dtype=np.float64) -> GradCheckResult:
    """Compare autodiff gradients of the scalar ``fn()`` against central differences.

    Each coordinate's relative error is ``|analytic - numeric| / max(floor, |analytic|)``.
    Coordinates where the perturbation changes a max-pool selection lie on a
    kink of the function; they are counted in ``kinks`` and not compared.
    ``max_coords`` samples that many coordinates per tensor.
    """
    rng = rng or np.random.default_rng(0)
    result = GradCheckResult()
    with precision(dtype):
        for t in tensors.values():
            t.data = t.data.astype(dtype)
            t.requires_grad = True
            t.grad = np.zeros_like(t.data)
        with record_pool_choices() as base_choices:
            out = fn()
        backward(out)
        for name, t in tensors.items():
            flat = t.data.reshape(-1)
            grad = t.grad.reshape(-1).copy()
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for i in coords:
                old = flat[i]
                flat[i] = old + eps
                with record_pool_choices() as plus:
                    fp = fn().item()
                flat[i] = old - eps
                with record_pool_choices() as minus:
                    fm = fn().item()
                flat[i] = old
                if not (_same_choices(plus, base_choices) and _same_choices(minus, base_choices)):
                    result.kinks += 1
                    continue
                numeric = (fp - fm) / (2 * eps)
                rel = abs(grad[i] - numeric) / max(floor, abs(grad[i]))
                result.checked += 1
                result.max_rel_error = max(result.max_rel_error, rel)
                if rel > rtol:
                    result.failures.append((name, int(i), float(grad[i]), float(numeric), float(rel)))
    return result
