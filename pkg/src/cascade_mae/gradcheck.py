from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import ParamStore

# Denominator floor, times max(1, |loss|). With h ~ 1e-5 a central difference
# carries round-off of about k*eps*|loss|/h, i.e. 1e-10..1e-9 for k = 10..100
# ulps, which is all a structurally-zero gradient (e.g. attention key biases)
# can show. The floor keeps that below tol = 1e-4; entries with gradients above
# the floor are judged purely relatively.
REL_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.worst <= self.tol

    def failures(self) -> list[str]:
        out = [f"{name}: non-finite loss under perturbation" for name in self.nonfinite]
        out += [
            f"{name}: max rel err {err:.3e} > {self.tol:.1e}"
            for name, err in self.max_rel_error.items()
            if err > self.tol
        ]
        return out


def grad_check(
    fn: Callable[[ParamStore], tuple[float, ParamStore]],
    params: ParamStore,
    tol: float = 1e-4,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients from ``fn`` with central differences.

    ``fn(params)`` returns ``(loss, grads)``. Parameters are promoted to
    float64; the step for entry ``v`` is ``1e-5 * (1 + |v|)``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    f0, grads = fn(params)
    floor = REL_FLOOR * max(1.0, abs(float(f0)))
    report = GradCheckReport(tol=tol)
    for name in names or sorted(params):
        value = params[name]
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != value.shape:
            raise ValueError(f"{name}: gradient shape {analytic.shape} != {value.shape}")
        numeric = np.empty_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5 * (1.0 + abs(orig))
            flat[i] = orig + h
            fp, _ = fn(params)
            flat[i] = orig - h
            fm, _ = fn(params)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.nonfinite.append(name)
                break
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        else:
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            report.max_rel_error[name] = float((np.abs(analytic - numeric) / denom).max())
    return report
