"""Monte Carlo and randomly shifted rank-1 lattice estimators on the unit cube.

Lattice points are ``frac(i z / N + Delta)`` for ``i = 1..N``.  Rules with
``N`` a power of two are embedded: the ``n``-point rule with the same
generating vector and shift is the subset ``i = k N / n``, so one sweep over
the largest rule yields the whole ladder of estimates.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .observables import pairwise_sum

log = logging.getLogger(__name__)

DEFAULT_KOROBOV_A = 1571


class EstimationError(RuntimeError):
    """A per-point evaluation failed; carries the point and shift index."""

    def __init__(self, msg, point_index=None, shift_index=None):
        super().__init__(msg)
        self.point_index = point_index
        self.shift_index = shift_index


def korobov_vector(m: int, N: int, a: int = DEFAULT_KOROBOV_A) -> np.ndarray:
    """``z = (1, a, a^2, ..., a^(m-1)) mod N``; ``a`` is first reduced mod ``N``."""
    if m < 1 or N < 2:
        raise ValueError(f"need m >= 1 and N >= 2, got m={m}, N={N}")
    if a <= 0:
        raise ValueError(f"Korobov parameter must be positive, got {a}")
    ar = a % N
    if ar == 0:
        raise ValueError(f"Korobov parameter {a} is a multiple of N={N}")
    if ar != a:
        log.info("Korobov parameter %d reduced to %d mod N=%d", a, ar, N)
    z = np.empty(m, dtype=np.int64)
    z[0] = 1 % N
    for j in range(1, m):
        z[j] = (z[j - 1] * ar) % N
    return z


@dataclass(frozen=True, eq=False)
class LatticeRule:
    m: int
    N: int
    z: np.ndarray
    shifts: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64)
        shifts = np.atleast_2d(np.asarray(self.shifts, dtype=float))
        if z.shape != (self.m,):
            raise ValueError(f"generating vector has shape {z.shape}, expected ({self.m},)")
        if shifts.shape[1] != self.m:
            raise ValueError(f"shifts have dimension {shifts.shape[1]}, expected {self.m}")
        if np.any(shifts < 0) or np.any(shifts >= 1):
            raise ValueError("shifts must lie in [0, 1)")
        bad = [int(c) for c in z if math.gcd(int(c), self.N) != 1]
        if bad:
            log.warning("generating vector components %s are not coprime to N=%d", bad, self.N)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "shifts", shifts)

    @property
    def R(self) -> int:
        return self.shifts.shape[0]


def make_lattice_rule(m: int, N: int, R: int = 8, seed: int = 0, a: int = DEFAULT_KOROBOV_A,
                      z=None) -> LatticeRule:
    """Korobov rule (or a supplied vector) with ``R`` uniform random shifts drawn from ``seed``."""
    z = korobov_vector(m, N, a) if z is None else np.asarray(z, dtype=np.int64) % N
    shifts = np.random.default_rng(seed).random((R, m)) if R > 0 else np.zeros((1, m))
    return LatticeRule(m, N, z, shifts, seed)


def read_vector_file(path) -> tuple[int, int, np.ndarray]:
    """Read a generating vector: first line ``m N``, then the ``m`` components."""
    tokens = Path(path).read_text().split()
    try:
        vals = [int(t) for t in tokens]
    except ValueError as exc:
        raise ValueError(f"{path}: non-integer token in vector file") from exc
    if len(vals) < 2:
        raise ValueError(f"{path}: missing 'm N' header")
    m, N = vals[0], vals[1]
    z = np.asarray(vals[2:], dtype=np.int64)
    if z.size != m:
        raise ValueError(f"{path}: header says m={m} but {z.size} components follow")
    if np.any(z < 1) or np.any(z >= N):
        raise ValueError(f"{path}: components must lie in [1, N-1]")
    return m, N, z


def lattice_points(rule: LatticeRule, shift_index: int, n: int | None = None) -> np.ndarray:
    """Points ``frac(i z / n + Delta_shift)`` for ``i = 1..n`` (``n`` divides ``N``).

    ``shift_index`` counts from 1.
    """
    if not 1 <= shift_index <= rule.R:
        raise ValueError(f"shift index must lie in 1..{rule.R}, got {shift_index}")
    n = rule.N if n is None else int(n)
    if n < 1 or rule.N % n:
        raise ValueError(f"sub-rule size {n} must divide N={rule.N}")
    i = np.arange(1, n + 1, dtype=np.int64)[:, None]
    # exact integer residues keep the points identical across embedded rules
    k = (i * (rule.N // n) * rule.z[None, :]) % rule.N
    pts = k / rule.N + rule.shifts[shift_index - 1][None, :]
    pts -= np.floor(pts)
    return pts


def mc_points(m: int, N: int, seed: int, replicate: int = 0) -> np.ndarray:
    """Uniform points; point ``i`` depends only on ``(seed, replicate, i)``."""
    out = np.empty((N, m))
    for i in range(N):
        out[i] = np.random.default_rng([seed, replicate, i]).random(m)
    return out


@dataclass
class EstimatorReport:
    per_shift: np.ndarray
    mean: np.ndarray
    rms: np.ndarray
    n_samples: int
    n_shifts: int
    wall_time: float = 0.0
    method: str = "qmc"

    def rms_error(self, reference, norm: Callable | None = None) -> float:
        """``sqrt(mean_r ||Q_r - reference||^2)`` with ``norm`` defaulting to the absolute value / 2-norm."""
        norm = norm or (lambda d: float(np.linalg.norm(np.ravel(d))))
        errs = np.array([norm(q - reference) for q in self.per_shift])
        return float(np.sqrt(np.mean(errs**2)))


def _evaluate(points: np.ndarray, F: Callable, batch: bool, shift_index: int) -> np.ndarray:
    if batch:
        try:
            vals = np.asarray(F(points))
        except EstimationError:
            raise
        except Exception as exc:  # noqa: BLE001 - any model failure aborts the estimator
            raise EstimationError(f"evaluation failed in shift {shift_index}: {exc}",
                                  None, shift_index) from exc
        if vals.shape[0] != points.shape[0]:
            raise EstimationError("batch evaluator returned the wrong number of values", None, shift_index)
        return vals
    out = []
    for i, p in enumerate(points):
        try:
            out.append(np.asarray(F(p), dtype=float))
        except Exception as exc:  # noqa: BLE001
            raise EstimationError(f"evaluation failed at point {i + 1} of shift {shift_index}: {exc}",
                                  i + 1, shift_index) from exc
    return np.stack(out)


def _report(per_shift, n, method, t0) -> EstimatorReport:
    per_shift = np.asarray(per_shift)
    mean = pairwise_sum(per_shift) / per_shift.shape[0]
    rms = np.sqrt(np.mean((per_shift - mean) ** 2, axis=0))
    return EstimatorReport(per_shift, mean, rms, n, per_shift.shape[0], time.perf_counter() - t0, method)


def qmc_estimate(rule: LatticeRule, F: Callable, n: int | None = None, batch: bool = False) -> EstimatorReport:
    """Randomly shifted lattice estimate of ``int F``, one estimate per shift.

    ``F`` maps a point in ``[0, 1)^m`` to a scalar or an array; with
    ``batch=True`` it maps an ``(k, m)`` array of points to ``k`` values.
    """
    t0 = time.perf_counter()
    n = rule.N if n is None else n
    per_shift = []
    for r in range(1, rule.R + 1):
        vals = _evaluate(lattice_points(rule, r, n), F, batch, r)
        per_shift.append(pairwise_sum(vals) / n)
    return _report(per_shift, n, "qmc", t0)


def mc_estimate(m: int, N: int, seed: int, F: Callable, replicates: int = 1, batch: bool = False) -> EstimatorReport:
    """Plain Monte Carlo with ``replicates`` independent streams (one "shift" each)."""
    t0 = time.perf_counter()
    per_shift = []
    for r in range(replicates):
        vals = _evaluate(mc_points(m, N, seed, r), F, batch, r + 1)
        per_shift.append(pairwise_sum(vals) / N)
    return _report(per_shift, N, "mc", t0)


def ladder_from_values(values: np.ndarray, sizes: Sequence[int], method: str) -> dict:
    """Estimates for several sample sizes from one sweep of the largest rule or stream.

    ``values`` has shape ``(R, N, ...)`` in point order ``i = 1..N``.  Lattice
    sub-rules use the embedded subset ``i = k N / n``; Monte Carlo uses prefixes.
    Returns ``{n: per_shift_estimates}``.
    """
    values = np.asarray(values)
    N = values.shape[1]
    out = {}
    for n in sizes:
        if N % n:
            raise ValueError(f"size {n} does not divide {N}")
        if method == "qmc":
            sub = values[:, N // n - 1 :: N // n]
        elif method == "mc":
            sub = values[:, :n]
        else:
            raise ValueError(f"unknown method {method!r}")
        out[n] = np.stack([pairwise_sum(s) / n for s in sub])
    return out
