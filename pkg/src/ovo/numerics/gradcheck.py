"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[int, int] | None  # (parameter index, flat entry index)
    checked: int
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)  # (param, entry, analytic, numeric)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} checked={self.checked} worst={self.worst}"


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_difference_check(loss_and_grad: Callable[[], tuple[float, Sequence[np.ndarray]]],
                            params: Sequence[np.ndarray], h: float = 1e-6, tol: float = 1e-4,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None,
                            loss_fn: Callable[[], float] | None = None) -> GradCheckReport:
    """Compare ``loss_and_grad()`` gradients with central differences.

    ``params`` are perturbed in place and restored. ``max_entries`` limits the
    number of entries checked per parameter (sampled with ``rng``). ``loss_fn``,
    when given, evaluates the loss alone and is used at perturbed points.
    """
    if loss_fn is None:
        loss_fn = lambda: loss_and_grad()[0]  # noqa: E731
    if not 0 < h <= 1e-3:
        raise ValueError("step h must lie in (0, 1e-3]")
    _, grads = loss_and_grad()
    grads = [np.array(g, dtype=np.float64) for g in grads]
    worst, worst_err, checked = None, 0.0, 0
    failures = []
    for pi, (p, g) in enumerate(zip(params, grads)):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = float(relative_error(gflat[i], num))
            checked += 1
            if err > worst_err or worst is None:
                worst, worst_err = (pi, int(i)), err
            if err > tol:
                failures.append((pi, int(i), float(gflat[i]), float(num)))
    return GradCheckReport(not failures, worst_err, worst, checked, failures)
