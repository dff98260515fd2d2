"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(ValueError):
    pass


@dataclass
class GradReport:
    errors: list[float]
    names: list[str]
    tol: float
    checked: list[int] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def worst(self) -> tuple[str, float]:
        i = int(np.argmax(self.errors))
        return self.names[i], self.errors[i]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if not self.errors:
            return f"gradcheck {status}: nothing checked"
        name, err = self.worst()
        return f"gradcheck {status}: max rel. error {err:.3e} at {name} (tol {self.tol:g}, {len(self.errors)} inputs)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, value_scale: float = 1.0) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, floor).

    The floor is the larger of 1e-3 of the largest numeric entry and
    1e-5 * max(1, |f|), so entries that are zero up to the rounding noise of
    the difference quotient do not turn that noise into a huge ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(1e-3 * float(np.abs(n).max()), 1e-5 * max(1.0, abs(value_scale)))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
) -> GradReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``f`` is re-evaluated for every perturbation, so it must be a pure function
    of the current ``inputs`` data (eval-mode, or with its own fixed RNG).
    ``max_entries`` caps the number of coordinates probed per input; the probed
    coordinates are drawn from ``rng``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs 64-bit inputs")
        t.requires_grad = True
        t.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function value is not finite")
    f0 = float(out.data.sum())
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    errors, checked = [], []
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data.sum())
            flat[i] = orig - step
            fm = float(f().data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value while perturbing entry {i}")
            num[j] = (fp - fm) / (2 * step)
        if not np.isfinite(ga).all():
            raise NonFiniteError("analytic gradient is not finite")
        errors.append(relative_error(ga.reshape(-1)[idx], num, f0))
        checked.append(int(idx.size))
    labels = list(names) if names is not None else [t.name or f"input{i}" for i, t in enumerate(inputs)]
    return GradReport(errors=errors, names=labels, tol=tol, checked=checked)
