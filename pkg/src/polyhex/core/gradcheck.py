from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParameterStore
from .tensor import Tensor


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[str, int] | None
    checked: int
    skipped: list[str] = field(default_factory=list)
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(loss_fn: Callable[[], Tensor], params: ParameterStore,
                      step: float = 1e-5, tol: float = 1e-5, floor: float = 1e-3,
                      batch_eval: Callable[[str, np.ndarray, float], np.ndarray] | None = None,
                      batch: int = 512) -> GradCheckReport:
    """Compare tape gradients with central differences for every entry.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor * g)``
    with ``g`` the largest analytic gradient magnitude in the store. The
    scaled floor keeps entries whose gradient is zero by construction (key
    biases under softmax, for example) from turning rounding noise into a
    large ratio, and leaves the verdict unchanged when the loss is rescaled.
    Parameters with ``requires_grad`` unset are skipped and listed.

    ``batch_eval(name, flat_indices, delta)``, when given, returns the loss
    for each copy of the parameters in which entry ``flat_indices[k]`` of
    ``name`` is shifted by ``delta``; perturbed losses are then evaluated
    in blocks of ``batch`` entries instead of one forward pass each.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"loss is not finite: {loss.data}")
    loss.backward()

    grads = {}
    for name, p in params.items():
        if p.requires_grad:
            grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    gmax = max((float(np.abs(g).max()) for g in grads.values() if g.size), default=0.0)
    denom_floor = max(floor * gmax, np.finfo(np.float64).tiny)

    report = GradCheckReport(0.0, 0.0, None, 0)
    for name, p in params.items():
        if not p.requires_grad:
            report.skipped.append(name)
            continue
        ga = grads[name].reshape(-1)
        num = np.empty(ga.size)
        if batch_eval is not None:
            for lo in range(0, ga.size, batch):
                idx = np.arange(lo, min(lo + batch, ga.size))
                up = np.asarray(batch_eval(name, idx, step), dtype=np.float64)
                down = np.asarray(batch_eval(name, idx, -step), dtype=np.float64)
                if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
                    raise GradCheckError(f"non-finite loss while perturbing {name}")
                num[idx] = (up - down) / (2.0 * step)
        else:
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss_fn().data)
                flat[i] = orig - step
                down = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
                num[i] = (up - down) / (2.0 * step)
        abs_err = np.abs(num - ga)
        rel = abs_err / np.maximum(np.maximum(np.abs(num), np.abs(ga)), denom_floor)
        report.checked += ga.size
        if ga.size:
            report.max_abs_error = max(report.max_abs_error, float(abs_err.max()))
            i = int(np.argmax(rel))
            report.per_param[name] = float(rel[i])
            if rel[i] > report.max_rel_error:
                report.max_rel_error = float(rel[i])
                report.worst = (name, i)
        else:
            report.per_param[name] = 0.0
    return report
