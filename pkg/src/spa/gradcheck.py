"""Finite-difference verification of backward rules.

Central differences with step h compare against the tape's analytic
gradients. Relative error uses a floor in the denominator so that
elements whose true gradient is ~0 are judged on an absolute scale
instead of amplifying rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numcore import Tape, Tensor, no_grad


@dataclass
class TensorCheck:
    index: int
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


@dataclass
class GradCheckReport:
    h: float
    floor: float
    tol: float
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def passed(self, tol: float | None = None) -> bool:
        return self.max_rel_err < (self.tol if tol is None else tol)

    def summary(self) -> str:
        return f"grad_check: {len(self.checks)} tensors, max rel err {self.max_rel_err:.3e}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f, tensors, h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-3
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f(*tensors) to central differences.

    f must be deterministic and must route every computation through numcore
    ops so the analytic side comes off the tape.
    """
    if isinstance(tensors, Tensor):
        tensors = [tensors]
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = f(*tensors)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {loss.shape}")
    tape.backward(loss)

    report = GradCheckReport(h=h, floor=floor, tol=tol)
    for i, t in enumerate(tensors):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                up = float(f(*tensors).data.reshape(()))
                flat[j] = orig - h
                down = float(f(*tensors).data.reshape(()))
                flat[j] = orig
                num_flat[j] = (up - down) / (2.0 * h)
        err = _rel_err(analytic, numeric, floor)
        report.checks.append(
            TensorCheck(
                index=i,
                analytic=analytic,
                numeric=numeric,
                max_rel_err=float(err.max()) if err.size else 0.0,
            )
        )
    return report
