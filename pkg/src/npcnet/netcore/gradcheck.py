from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst_param: str | None
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAILED"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(abs {self.max_abs_error:.3e}) over {self.n_checked} entries, worst={self.worst_param}"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central finite differences.

    ``f`` rebuilds the graph from the current parameter values on every call.
    The relative error of an entry is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; the floor keeps entries whose true gradient is zero from
    dominating the report with round-off noise.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst_rel, worst_abs, worst_name, n_checked = 0.0, 0.0, None, 0
    for i, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            rng = rng if rng is not None else np.random.default_rng(0)
            entries = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            up = f().item()
            flat[j] = orig - h
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            a = ga.reshape(-1)[j]
            abs_err = abs(a - numeric)
            rel = abs_err / max(abs(a), abs(numeric), floor)
            n_checked += 1
            if rel > worst_rel:
                worst_rel, worst_name = rel, f"{p.name or f'param{i}'}[{j}]"
            worst_abs = max(worst_abs, abs_err)
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst_rel, worst_abs, n_checked, worst_name, worst_rel < tol)
