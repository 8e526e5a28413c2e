"""Central finite-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor, forward_record


@dataclass
class GradCheckFailure:
    input_name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol_rel: float
    overflow: bool = False
    failures: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def grad_check(program, point, eps=1e-5, tol_rel=1e-4, floor=1e-8,
               max_failures=10):
    """Compare analytic gradients of a scalar-valued program to central
    finite differences at the given point.

    program: callable taking keyword Tensors, returning a scalar Tensor.
    point: dict name -> ndarray (all entries are checked).
    floor: absolute denominator floor for the relative error; entries whose
    analytic and numeric gradients both sit below it are dominated by
    finite-difference roundoff and compare as equal.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    def run(values):
        tensors = {k: Tensor(v, requires_grad=True) for k, v in values.items()}
        out, tape = forward_record(lambda **kw: program(**kw), tensors, check_finite=False)
        if isinstance(out, (tuple, list)) or np.asarray(out.data).size != 1:
            raise ValueError("grad_check requires a scalar-valued program")
        return out, tape, tensors

    out, tape, tensors = run(point)
    if not np.isfinite(out.data):
        return GradCheckReport(passed=False, max_rel_err=np.inf, tol_rel=tol_rel,
                               overflow=True)
    tape.backward(seed=np.ones_like(out.data))
    analytic = {k: (tensors[k].grad if tensors[k].grad is not None
                    else np.zeros_like(point[k])) for k in point}

    failures = []
    max_rel = 0.0
    overflow = False
    for name, base in point.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _, _ = run(point)
            flat[i] = orig - eps
            fm, _, _ = run(point)
            flat[i] = orig
            if not (np.isfinite(fp.data) and np.isfinite(fm.data)):
                overflow = True
                failures.append(GradCheckFailure(name, np.unravel_index(i, base.shape),
                                                 np.nan, np.nan, np.inf))
                max_rel = np.inf
                continue
            num = (float(fp.data) - float(fm.data)) / (2.0 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            max_rel = max(max_rel, rel)
            if rel > tol_rel and len(failures) < max_failures:
                failures.append(GradCheckFailure(name, np.unravel_index(i, base.shape),
                                                 ana, num, rel))
    return GradCheckReport(passed=(max_rel <= tol_rel and not overflow),
                           max_rel_err=max_rel, tol_rel=tol_rel,
                           overflow=overflow, failures=failures)
