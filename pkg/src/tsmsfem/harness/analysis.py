"""Convergence rows and log-log slope fits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ExactMatchError(ValueError):
    """An error value of exactly zero: the compared solutions coincide."""


@dataclass(frozen=True)
class ConvergenceRow:
    abscissa: float
    errors: dict = field(default_factory=dict)  # norm name -> error


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    n: int


def fit_slope(rows, norm: str | None = None) -> SlopeFit:
    """Least-squares slope of ``log(error)`` against ``log(abscissa)``.

    ``rows`` holds :class:`ConvergenceRow` objects (``norm`` picks the error)
    or plain ``(abscissa, error)`` pairs.
    """
    xs, ys = [], []
    for r in rows:
        if isinstance(r, ConvergenceRow):
            x, y = r.abscissa, r.errors[norm or "L2"]
        else:
            x, y = r
        xs.append(float(x))
        ys.append(float(y))
    x, y = np.array(xs), np.array(ys)
    if x.size < 3:
        raise ValueError(f"need at least 3 rows to fit a slope, got {x.size}")
    d = np.diff(x)
    if not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("abscissae must be strictly monotone")
    if np.any(x <= 0):
        raise ValueError("abscissae must be positive")
    if np.any(y == 0):
        raise ExactMatchError(f"zero error at abscissa {x[y == 0][0]:g}; the compared solutions coincide")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("errors must be positive and finite")
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return SlopeFit(float(coef[0]), float(coef[1]), res, int(x.size))
