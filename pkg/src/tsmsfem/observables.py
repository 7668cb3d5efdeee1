"""Mass, energy, second moment, expected density and linear functionals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (AssembledOperators, MeshMismatchError, WaveField, integrate_density,
                  evaluate_on_quadrature, quadrature, quadrature_values)


def _vals(field_or_array, operators: AssembledOperators) -> np.ndarray:
    if isinstance(field_or_array, WaveField):
        if field_or_array.mesh is not operators.mesh:
            raise MeshMismatchError("field and operators live on different meshes")
        U = field_or_array.values
    else:
        U = np.asarray(field_or_array)
    if U.shape != (operators.mesh.n_nodes,):
        raise MeshMismatchError(f"expected {operators.mesh.n_nodes} nodal values, got shape {U.shape}")
    return U


def _herm(U, A, W=None) -> float:
    W = U if W is None else W
    return float(np.real(np.vdot(W, A @ U)))


def mass(field, operators: AssembledOperators) -> float:
    """Discrete mass ``U^* M U``."""
    U = _vals(field, operators)
    return max(_herm(U, operators.M), 0.0)


def quartic(field, operators: AssembledOperators) -> float:
    """``||psi_h||_{L4}^4`` by quadrature."""
    U = _vals(field, operators)
    return integrate_density(operators.mesh, U, power=4)


def energy(field, operators: AssembledOperators, potential=None, lam: float = 0.0) -> float:
    """``(eps^2/2) ||grad psi||^2 + (v, |psi|^2) + (lam/2) ||psi||_{L4}^4``.

    The potential term uses the same quadrature as the assembled ``V``; when
    ``potential`` is None the operators' own potential is used.
    """
    U = _vals(field, operators)
    kin = 0.5 * operators.eps**2 * _herm(U, operators.S)
    if potential is None:
        pot = _herm(U, operators.V)
    else:
        w = evaluate_on_quadrature(operators.mesh, potential)
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite potential values at quadrature points")
        pot = integrate_density(operators.mesh, U, weight=w)
    quart = 0.5 * lam * quartic(U, operators) if lam else 0.0
    return kin + pot + quart


def second_moment(field, operators: AssembledOperators, center=None) -> float:
    """``int |x - center|^2 |psi_h|^2 dx`` (center defaults to the origin)."""
    U = _vals(field, operators)
    q = quadrature(operators.mesh)
    pts = q.points if center is None else q.points - np.asarray(center, dtype=float)
    r2 = np.sum(pts**2, axis=-1)
    return integrate_density(operators.mesh, U, weight=r2)


def linear_functional(field, operators: AssembledOperators, g_field) -> complex:
    """``(psi_h, g) = g^* M U``."""
    U = _vals(field, operators)
    g = _vals(g_field, operators)
    return complex(np.vdot(g, operators.M @ U))


@dataclass
class ObservableSeries:
    t: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    densities: list | None = None

    def append(self, t, m, e, a, density=None):
        if self.t and not t > self.t[-1]:
            raise ValueError(f"time stamps must increase strictly ({t} after {self.t[-1]})")
        self.t.append(float(t))
        self.mass.append(float(m))
        self.energy.append(float(e))
        self.second_moment.append(float(a))
        if density is not None:
            if self.densities is None:
                self.densities = []
            self.densities.append(np.asarray(density))

    def __len__(self):
        return len(self.t)

    def as_arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("t", "mass", "energy", "second_moment")}


def recorder(operators: AssembledOperators, lam: float = 0.0, keep_density: bool = False, center=None):
    """Return ``(series, observe)`` with ``observe(t, U)`` suitable for ``propagate.run``."""
    series = ObservableSeries()

    def observe(t, U):
        dens = np.abs(U) ** 2 if keep_density else None
        series.append(t, mass(U, operators), energy(U, operators, lam=lam),
                      second_moment(U, operators, center), dens)

    return series, observe


@dataclass
class DensityAccumulator:
    """Running sum of nodal densities ``|U_p|^2``."""

    n: int
    total: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.n)

    def copy(self):
        return DensityAccumulator(self.n, self.total.copy(), self.count)


def accumulate_density(acc: DensityAccumulator, field) -> DensityAccumulator:
    U = field.values if isinstance(field, WaveField) else np.asarray(field)
    if U.shape != (acc.n,):
        raise MeshMismatchError(f"accumulator holds {acc.n} nodes, field has shape {U.shape}")
    acc.total += U.real**2 + U.imag**2
    acc.count += 1
    return acc


def merge(a: DensityAccumulator, b: DensityAccumulator) -> DensityAccumulator:
    if a.n != b.n:
        raise MeshMismatchError("cannot merge accumulators of different size")
    return DensityAccumulator(a.n, a.total + b.total, a.count + b.count)


def pairwise_merge(accs) -> DensityAccumulator:
    """Merge accumulators in a fixed binary-tree order, independent of worker scheduling."""
    accs = list(accs)
    if not accs:
        raise ValueError("nothing to merge")
    while len(accs) > 1:
        nxt = [merge(accs[i], accs[i + 1]) for i in range(0, len(accs) - 1, 2)]
        if len(accs) % 2:
            nxt.append(accs[-1])
        accs = nxt
    return accs[0]


def pairwise_sum(rows: np.ndarray) -> np.ndarray:
    """Sum along axis 0 with a fixed binary-tree order."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] == 0:
        raise ValueError("nothing to sum")
    while rows.shape[0] > 1:
        k = rows.shape[0] // 2
        head = rows[: 2 * k : 2] + rows[1 : 2 * k : 2]
        rows = np.concatenate([head, rows[2 * k :]], axis=0)
    return rows[0]


def expected_density(acc: DensityAccumulator) -> np.ndarray:
    if acc.count == 0:
        raise ValueError("expected density of an empty accumulator")
    return acc.total / acc.count


def density_l2(rho, operators: AssembledOperators) -> float:
    """``L2`` norm of a nodal density, interpolated in the P1 space."""
    r = np.asarray(rho, dtype=float)
    return float(np.sqrt(max(r @ (operators.M @ r), 0.0)))


__all__ = ["mass", "energy", "quartic", "second_moment", "linear_functional", "ObservableSeries",
           "recorder", "DensityAccumulator", "accumulate_density", "merge", "pairwise_merge",
           "pairwise_sum", "expected_density", "density_l2", "quadrature_values"]
