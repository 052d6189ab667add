"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import ComputeError, Tape, Tensor, backward, constant


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    passed: bool
    tol: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max relative error {self.max_rel_error:.3e} "
                f"at {self.worst_index} (tol {self.tol:.1e})")


def _eval_scalar(f, x) -> float:
    out = f(x)
    v = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(v):
        raise ComputeError("function value is non-finite at a probe point")
    return v


def _rel_error(a: float, n: float, scale_floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), scale_floor)


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-6,
               tol: float = 1e-4, scale_floor: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` at ``point`` against
    central finite differences with step ``eps``.

    Relative error uses ``max(|analytic|, |numeric|, scale_floor)`` as the
    denominator so that finite-difference roundoff on near-zero coordinates
    does not drown the check.
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.variable(point)
    loss = f(x)
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ValueError("grad_check target must return a scalar Tensor")
    grads = backward(loss)
    analytic = grads[x.tape_id].data if x.tape_id in grads else np.zeros_like(point)

    worst = 0.0
    worst_idx: tuple = ()
    for idx in np.ndindex(point.shape) if point.shape else [()]:
        bump = np.zeros_like(point)
        bump[idx] = eps
        up = _eval_scalar(f, constant(point + bump))
        down = _eval_scalar(f, constant(point - bump))
        numeric = (up - down) / (2.0 * eps)
        err = _rel_error(float(analytic[idx]), numeric, scale_floor)
        if err >= worst:
            worst, worst_idx = err, idx
    return GradCheckReport(worst, worst_idx, worst <= tol, tol)


def grad_check_params(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, np.ndarray], eps: float = 1e-6,
                      tol: float = 1e-4, scale_floor: float = 1e-3) -> GradCheckReport:
    """Finite-difference check of ``f`` over a whole parameter dict.

    ``f`` receives a name -> Tensor mapping and must return a scalar.  Every
    coordinate of every parameter is probed; the reported worst index is
    ``(name, index)``.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    bound = {k: tape.variable(v) for k, v in base.items()}
    loss = f(bound)
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ValueError("grad_check target must return a scalar Tensor")
    grads = backward(loss)
    analytic = {k: (grads[t.tape_id].data if t.tape_id in grads else np.zeros_like(base[k]))
                for k, t in bound.items()}

    def value_at(point: Mapping[str, np.ndarray]) -> float:
        out = f({k: constant(v) for k, v in point.items()})
        v = out.item()
        if not np.isfinite(v):
            raise ComputeError("function value is non-finite at a probe point")
        return v

    worst = 0.0
    worst_idx: tuple = ()
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape) if arr.shape else [()]:
            bumped = dict(base)
            plus = arr.copy()
            plus[idx] += eps
            bumped[name] = plus
            up = value_at(bumped)
            minus = arr.copy()
            minus[idx] -= eps
            bumped[name] = minus
            down = value_at(bumped)
            numeric = (up - down) / (2.0 * eps)
            err = _rel_error(float(analytic[name][idx]), numeric, scale_floor)
            if err >= worst:
                worst, worst_idx = err, (name, idx)
    return GradCheckReport(worst, worst_idx, worst <= tol, tol)
