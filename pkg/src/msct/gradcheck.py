"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor, backward, no_grad


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    eps: float
    per_param: dict[str, float] = field(default_factory=dict)
    # (name, flat index, analytic, numeric, relative error)
    worst: tuple[str, int, float, float, float] | None = None
    n_components: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_err < rtol


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps components whose true gradient is ~0 from reporting
    round-off noise as a large relative error.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    *,
    floor: float = 1e-5,
    max_components: int | None = None,
    seed: int = 0,
    corrupt: float | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current ``params`` values each call.
    With ``max_components`` set, that many components per parameter are
    sampled (without replacement) instead of checking every one. ``corrupt``
    scales the analytic gradient, which exists so callers can confirm a
    broken gradient is caught.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with no_grad():
        v1, v2 = f().item(), f().item()
    if v1 != v2:
        raise NonDeterministicError(f"f returned {v1!r} then {v2!r} for identical parameters")

    for p in params.values():
        p.zero_grad()
    grads = backward(f())
    analytic = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps)
    for name, p in params.items():
        n = p.size
        if max_components is not None and n > max_components:
            idx = np.sort(rng.choice(n, size=max_components, replace=False))
        else:
            idx = np.arange(n)
        base = p.data
        worst = 0.0
        for k in idx:
            flat = base.ravel().copy()
            flat[k] = base.flat[k] + eps
            p.data = flat.reshape(base.shape)
            with no_grad():
                up = f().item()
            flat[k] = base.flat[k] - eps
            p.data = flat.reshape(base.shape)
            with no_grad():
                down = f().item()
            p.data = base
            numeric = (up - down) / (2 * eps)
            a = float(analytic[name].flat[k])
            if corrupt is not None:
                a *= corrupt
            err = relative_error(a, numeric, floor)
            report.n_components += 1
            if err >= worst:
                worst = err
                if report.worst is None or err >= report.worst[4]:
                    report.worst = (name, int(k), a, numeric, err)
        report.per_param[name] = worst
    return report
