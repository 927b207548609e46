"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import OracleError
from .tensor import Tensor, record_kinks

DENOM_FLOOR = 1e-8


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over entries of |a-b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), DENOM_FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                   kink_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x.data`` (perturbed in place).

    If ``kink_mask`` (shaped like ``x``) is given, entries whose stencil
    changes any relu activation pattern are flagged ``True`` in it.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    kflat = None if kink_mask is None else kink_mask.reshape(-1)
    base = None
    if kflat is not None:
        with record_kinks() as base:
            _scalar(f())
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with record_kinks() as kp:
            fp = _scalar(f())
        flat[i] = orig - h
        with record_kinks() as km:
            fm = _scalar(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
        if kflat is not None:
            kflat[i] = not (_same_pattern(base, kp) and _same_pattern(base, km))
    return grad


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _scalar(out) -> float:
    val = np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)
    if val.size != 1:
        raise OracleError(f"gradcheck needs a scalar function, got shape {val.shape}")
    val = float(val.reshape(()))
    if not np.isfinite(val):
        raise OracleError("non-finite function value during finite differencing")
    return val


def tape_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list:
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f()
    _scalar(out)
    out.backward()
    grads = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise OracleError("non-finite tape gradient")
    return grads


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Return the max relative error between tape and central-difference gradients.

    ``f`` takes no arguments and must read ``inputs`` through closure; their
    ``.data`` arrays are perturbed in place and restored afterwards.
    """
    return gradcheck_report(f, inputs, h).error


@dataclass
class GradcheckReport:
    error: float
    checked: int
    skipped: int


def gradcheck_report(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                     skip_kinks: bool = False) -> GradcheckReport:
    """Like :func:`gradcheck`, optionally excluding entries whose stencil straddles a relu kink."""
    inputs = list(inputs)
    analytic = tape_grads(f, inputs)
    worst, checked, skipped = 0.0, 0, 0
    for x, ga in zip(inputs, analytic):
        kinks = np.zeros(x.shape, dtype=bool) if skip_kinks else None
        gn = numerical_grad(f, x, h, kinks)
        keep = ~kinks if skip_kinks else np.ones(x.shape, dtype=bool)
        worst = max(worst, relative_error(ga[keep], gn[keep]))
        checked += int(keep.sum())
        skipped += int((~keep).sum())
    return GradcheckReport(worst, checked, skipped)
