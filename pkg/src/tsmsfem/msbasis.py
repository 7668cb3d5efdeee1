"""Global multiscale basis functions from equality-constrained energy minimisation.

For every coarse node ``p`` the basis function ``phi_p`` minimises
``a(phi, phi) = (eps^2/2) (grad phi, grad phi) + (v phi, phi)`` over the fine
P1 space subject to ``(phi, phi_q^H) = lam_p delta_pq`` for all coarse hats,
with ``lam_p = (1, phi_p^H)``.  All problems share one KKT matrix, which is
factorised once.
"""
from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import AssembledOperators, WaveField, _local_mass, _local_stiffness, _scatter
from .mesh import MeshPair, nodal_patch

log = logging.getLogger(__name__)

CONSTRAINT_TOL = 1e-8


class BasisError(RuntimeError):
    pass


_B_CACHE: "weakref.WeakKeyDictionary[MeshPair, sp.csr_matrix]" = weakref.WeakKeyDictionary()


def constraint_matrix(mesh_pair: MeshPair) -> sp.csr_matrix:
    """``B[q, s] = (phi_s^h, phi_q^H)``, shape ``(N_H, N_h)``."""
    B = _B_CACHE.get(mesh_pair)
    if B is None:
        M = _scatter(mesh_pair.fine, _local_mass(mesh_pair.fine))
        B = (mesh_pair.prolongation.T @ M).tocsr()
        _B_CACHE[mesh_pair] = B
    return B


def coarse_weights(mesh_pair: MeshPair) -> np.ndarray:
    """``(1, phi_p^H)`` for every coarse node."""
    return np.asarray(constraint_matrix(mesh_pair).sum(axis=1)).ravel()


def clement_interpolate(field_fine, mesh_pair: MeshPair) -> np.ndarray:
    """Weighted Clement coefficients ``(f, phi_p^H) / (1, phi_p^H)``."""
    if isinstance(field_fine, WaveField):
        if field_fine.mesh is not mesh_pair.fine:
            raise ValueError("field does not live on the fine mesh of the pair")
        f = field_fine.values
    else:
        f = np.asarray(field_fine)
    if f.shape[0] != mesh_pair.fine.n_nodes:
        raise ValueError(f"expected {mesh_pair.fine.n_nodes} fine coefficients, got {f.shape[0]}")
    B = constraint_matrix(mesh_pair)
    lam = coarse_weights(mesh_pair)
    out = B @ f
    return out / (lam if out.ndim == 1 else lam[:, None])


@dataclass(frozen=True, eq=False)
class MultiscaleBasis:
    """Fine-nodal coefficients ``C`` (one column per coarse node) and weights."""

    mesh_pair: MeshPair
    C: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    eps: float
    potential: object = field(default=None, repr=False)
    include_potential: bool = True

    @property
    def n_coarse(self) -> int:
        return self.C.shape[1]

    def constraint_residual(self) -> float:
        """``max |B C - diag(weights)|`` relative to ``max(weights)``."""
        B = constraint_matrix(self.mesh_pair)
        R = B @ self.C - np.diag(self.weights)
        return float(np.max(np.abs(R)) / np.max(self.weights))


@dataclass(frozen=True, eq=False)
class CoarseOperators:
    """Galerkin matrices of the multiscale space (dense)."""

    basis: MultiscaleBasis
    M: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    eps: float

    @cached_property
    def A(self) -> np.ndarray:
        return 0.5 * self.eps**2 * self.S + self.V

    @cached_property
    def mass_cho(self):
        return sla.cho_factor(self.M)


def _kkt_solve(A: sp.spmatrix, B: sp.spmatrix, rhs_c: np.ndarray) -> np.ndarray:
    n, k = A.shape[0], B.shape[0]
    K = sp.bmat([[A, B.T], [B, None]], format="csc")
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise BasisError(f"KKT factorisation failed ({exc}); size {n}+{k}, "
                         f"|A|_inf={spla.norm(A, np.inf):.3e}, |B|_inf={spla.norm(B, np.inf):.3e}") from exc
    rhs = np.zeros((n + k, rhs_c.shape[1]))
    rhs[n:] = rhs_c
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        diag = np.abs(lu.U.diagonal())
        raise BasisError(f"KKT solve produced non-finite values; pivot ratio {diag.min() / diag.max():.3e}")
    # one step of iterative refinement keeps the constraint residual near round-off
    r = rhs - K @ sol
    sol += lu.solve(r)
    return sol[:n]


def build_basis(operators_fine: AssembledOperators, mesh_pair: MeshPair,
                include_potential: bool = True, normalization: str = "mass") -> MultiscaleBasis:
    """Solve the constrained minimisation problems for all coarse nodes.

    Parameters
    ----------
    operators_fine : AssembledOperators
        Fine-mesh matrices; the energy form is ``(eps^2/2) S + V``.
    include_potential : bool
        Drop ``V`` from the energy form when False (kinetic-only basis).
    normalization : {"mass", "unit"}
        Constraint right-hand side ``(1, phi_p^H)`` (default) or 1.
    """
    if operators_fine.mesh is not mesh_pair.fine:
        raise BasisError("operators are not assembled on the fine mesh of the pair")
    eps = operators_fine.eps
    A = operators_fine.A if include_potential else (0.5 * eps**2 * operators_fine.S).tocsr()
    B = constraint_matrix(mesh_pair)
    lam = coarse_weights(mesh_pair)
    if np.any(lam <= 0):
        raise BasisError("coarse hat integrals must be positive")
    gram = (B @ mesh_pair.prolongation).toarray()
    try:
        sla.cholesky(gram)
    except sla.LinAlgError as exc:
        raise BasisError("constraint matrix is rank deficient; coarse space not injected correctly") from exc
    if include_potential and operators_fine.V.nnz and operators_fine.V.diagonal().min() < 0:
        log.info("potential takes negative values; energy form may be indefinite")
    if normalization == "mass":
        rhs = np.diag(lam)
    elif normalization == "unit":
        rhs = np.eye(lam.size)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    C = _kkt_solve(A, B, rhs)
    weights = np.diag(rhs).copy()
    basis = MultiscaleBasis(mesh_pair, C, weights, eps, operators_fine.potential, include_potential)
    res = basis.constraint_residual()
    if res > CONSTRAINT_TOL:
        raise BasisError(f"constraint residual {res:.3e} exceeds {CONSTRAINT_TOL}")
    return basis


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def project_operators(basis: MultiscaleBasis, operators_fine: AssembledOperators) -> CoarseOperators:
    """Congruence products ``C^T M C``, ``C^T S C`` and ``C^T V C``."""
    C = basis.C
    if C.shape[0] != operators_fine.mesh.n_nodes:
        raise ValueError(f"basis has {C.shape[0]} fine rows, operators have {operators_fine.mesh.n_nodes} nodes")
    Mms = _sym(C.T @ (operators_fine.M @ C))
    Sms = _sym(C.T @ (operators_fine.S @ C))
    Vms = _sym(C.T @ (operators_fine.V @ C))
    return CoarseOperators(basis, Mms, Sms, Vms, operators_fine.eps)


def reconstruct_fine(basis: MultiscaleBasis, coarse_coefficients, t: float = 0.0) -> WaveField:
    U = np.asarray(coarse_coefficients)
    if U.shape != (basis.n_coarse,):
        raise ValueError(f"expected {basis.n_coarse} coarse coefficients, got shape {U.shape}")
    return WaveField(basis.C @ U, basis.mesh_pair.fine, t)


def decay_profile(basis: MultiscaleBasis, p: int, ell_max: int):
    """Tail gradient energies ``||grad phi_p||_{L2(D minus D_ell)}`` for ``ell = 0..ell_max``.

    Returns ``(tails, total)`` where ``total = ||grad phi_p||``.
    """
    if ell_max < 1:
        raise ValueError("ell_max must be >= 1")
    pair = basis.mesh_pair
    fine = pair.fine
    c = basis.C[:, p]
    loc = c[fine.cells]
    cell_energy = np.clip(np.einsum("ca,cab,cb->c", loc, _local_stiffness(fine), loc), 0.0, None)
    coarse_energy = np.bincount(pair.fine_cell_parent, weights=cell_energy, minlength=pair.coarse.n_cells)
    total = float(np.sqrt(coarse_energy.sum()))
    tails = np.empty(ell_max + 1)
    for ell in range(ell_max + 1):
        outside = np.ones(pair.coarse.n_cells, dtype=bool)
        outside[list(nodal_patch(pair, p, ell).cells)] = False
        tails[ell] = np.sqrt(coarse_energy[outside].sum())
    # subset sums in different orders may differ in the last bit
    return np.minimum.accumulate(tails), total


def fitted_decay_ratio(tails: np.ndarray, floor: float = 1e-13) -> float:
    """Geometric decay ratio of the tail energies, fitted before saturation."""
    t = np.asarray(tails)
    keep = t > floor * max(t[0], 1e-300)
    idx = np.flatnonzero(keep)
    if idx.size < 2:
        return 0.0
    slope = np.polyfit(idx, np.log(t[idx]), 1)[0]
    return float(np.exp(slope))
