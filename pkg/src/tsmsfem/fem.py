"""P1 finite elements on periodic meshes: assembly, L2 projection, norms, errors."""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, MeshPair

NORM_KINDS = ("L2", "H1", "L4")

# 3-point Gauss-Legendre on [0, 1] (exact to degree 5)
_GL3_X = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
_GL3_W = np.array([5.0, 8.0, 5.0]) / 18.0
# 6-point symmetric triangle rule (exact to degree 4), barycentric coordinates
_TRI_A, _TRI_WA = 0.445948490915965, 0.223381589678011
_TRI_B, _TRI_WB = 0.091576213509771, 0.109951743655322
_TRI6_L = np.array([
    [_TRI_A, _TRI_A, 1 - 2 * _TRI_A],
    [_TRI_A, 1 - 2 * _TRI_A, _TRI_A],
    [1 - 2 * _TRI_A, _TRI_A, _TRI_A],
    [_TRI_B, _TRI_B, 1 - 2 * _TRI_B],
    [_TRI_B, 1 - 2 * _TRI_B, _TRI_B],
    [1 - 2 * _TRI_B, _TRI_B, _TRI_B],
])
_TRI6_W = np.array([_TRI_WA] * 3 + [_TRI_WB] * 3)


class AssemblyError(RuntimeError):
    pass


class MeshMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Per-cell quadrature data: physical points, weights and P1 shape values."""

    points: np.ndarray   # (n_cells, nq, dim)
    weights: np.ndarray  # (n_cells, nq)
    shape: np.ndarray    # (nq, dim + 1)


_QUAD_CACHE: "weakref.WeakKeyDictionary[Mesh, Quadrature]" = weakref.WeakKeyDictionary()


def quadrature(mesh: Mesh) -> Quadrature:
    q = _QUAD_CACHE.get(mesh)
    if q is None:
        if mesh.dim == 1:
            shape = np.stack([1.0 - _GL3_X, _GL3_X], axis=1)
            ref_w = _GL3_W
        else:
            shape = _TRI6_L
            ref_w = _TRI6_W
        points = np.einsum("qa,cad->cqd", shape, mesh.cell_coords)
        weights = mesh.cell_measures[:, None] * ref_w[None, :]
        q = Quadrature(points, weights, shape)
        _QUAD_CACHE[mesh] = q
    return q


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    """Sum local ``(n_cells, nv, nv)`` matrices into an exactly symmetric CSR matrix."""
    nv = mesh.dim + 1
    rows = np.repeat(mesh.cells, nv, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nv)).ravel()
    A = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    A.sum_duplicates()
    return ((A + A.T) * 0.5).tocsr()


def _local_mass(mesh: Mesh) -> np.ndarray:
    m = mesh.cell_measures
    if mesh.dim == 1:
        ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return m[:, None, None] * ref[None]


def _shape_gradients(mesh: Mesh) -> np.ndarray:
    """Constant gradients of the P1 shape functions, shape ``(n_cells, nv, dim)``."""
    cc = mesh.cell_coords
    if mesh.dim == 1:
        hx = cc[:, 1, 0] - cc[:, 0, 0]
        g = np.stack([-1.0 / hx, 1.0 / hx], axis=1)
        return g[:, :, None]
    J = np.stack([cc[:, 1] - cc[:, 0], cc[:, 2] - cc[:, 0]], axis=2)  # columns are edges
    Jinv = np.linalg.inv(J)
    g12 = Jinv  # rows: gradients of barycentric coordinates 1 and 2
    g0 = -g12.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g12], axis=1)


def _local_stiffness(mesh: Mesh) -> np.ndarray:
    g = _shape_gradients(mesh)
    return mesh.cell_measures[:, None, None] * np.einsum("cad,cbd->cab", g, g)


def evaluate_on_quadrature(mesh: Mesh, func: Callable) -> np.ndarray:
    """Evaluate ``func`` (taking points of shape ``(n, dim)``) at all quadrature points."""
    q = quadrature(mesh)
    nc, nq, d = q.points.shape
    vals = np.asarray(func(q.points.reshape(nc * nq, d)))
    if vals.ndim == 0:
        vals = np.full(nc * nq, vals)
    return vals.reshape(nc, nq)


def _local_weighted_mass(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    q = quadrature(mesh)
    pp = q.shape[:, :, None] * q.shape[:, None, :]  # (nq, nv, nv)
    return np.einsum("cq,qab->cab", q.weights * values, pp)


@dataclass(frozen=True, eq=False)
class AssembledOperators:
    """Sparse mass ``M``, stiffness ``S`` and potential ``V`` matrices on a mesh."""

    mesh: Mesh
    M: sp.csr_matrix = field(repr=False)
    S: sp.csr_matrix = field(repr=False)
    V: sp.csr_matrix = field(repr=False)
    eps: float
    potential: Callable | None = field(default=None, repr=False)

    @cached_property
    def A(self) -> sp.csr_matrix:
        """Linear Hamiltonian ``(eps^2 / 2) S + V``."""
        return (0.5 * self.eps**2 * self.S + self.V).tocsr()

    @cached_property
    def mass_lu(self):
        return spla.splu(self.M.tocsc())

    @cached_property
    def nodal_potential(self) -> np.ndarray:
        if self.potential is None:
            return np.zeros(self.mesh.n_nodes)
        return np.asarray(self.potential(self.mesh.nodes), dtype=float)


@dataclass(eq=False)
class WaveField:
    """Complex nodal coefficients of a P1 function on ``mesh`` at time ``t``."""

    values: np.ndarray
    mesh: Mesh
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mesh.n_nodes,):
            raise MeshMismatchError(
                f"field has {self.values.shape} coefficients, mesh has {self.mesh.n_nodes} nodes"
            )


def assemble(mesh: Mesh, potential_evaluator: Callable | None, eps: float) -> AssembledOperators:
    """Assemble mass, stiffness and potential matrices.

    ``potential_evaluator`` maps points of shape ``(n, dim)`` to real values;
    ``None`` means ``v = 0``.
    """
    M = _scatter(mesh, _local_mass(mesh))
    S = _scatter(mesh, _local_stiffness(mesh))
    if potential_evaluator is None:
        V = sp.csr_matrix((mesh.n_nodes, mesh.n_nodes))
    else:
        vals = evaluate_on_quadrature(mesh, potential_evaluator)
        bad = ~np.isfinite(vals)
        if bad.any():
            cell = int(np.argwhere(bad)[0, 0])
            raise AssemblyError(f"non-finite potential value in cell {cell}")
        if np.iscomplexobj(vals):
            raise AssemblyError("potential must be real valued")
        V = _scatter(mesh, _local_weighted_mass(mesh, vals))
    return AssembledOperators(mesh, M, S, V, float(eps), potential_evaluator)


def load_vector(mesh: Mesh, func: Callable) -> np.ndarray:
    """``b_p = (f, phi_p)`` by quadrature."""
    q = quadrature(mesh)
    f = evaluate_on_quadrature(mesh, func)
    local = np.einsum("cq,qa->ca", q.weights * f, q.shape)
    b = np.zeros(mesh.n_nodes, dtype=local.dtype)
    np.add.at(b, mesh.cells, local)
    return b


def project_l2(function: Callable, mesh: Mesh, operators: AssembledOperators) -> WaveField:
    """L2 projection of ``function`` onto the P1 space of ``mesh``."""
    _check_mesh(mesh, operators)
    b = load_vector(mesh, function).astype(complex)
    lu = operators.mass_lu
    U = lu.solve(np.ascontiguousarray(b.real)) + 1j * lu.solve(np.ascontiguousarray(b.imag))
    res = np.linalg.norm(operators.M @ U - b)
    if not np.all(np.isfinite(U)) or res > 1e-12 * max(np.linalg.norm(b), 1e-300):
        raise np.linalg.LinAlgError(f"mass-matrix solve failed, residual {res:.3e}")
    return WaveField(U, mesh)


def _values(field_or_array, operators: AssembledOperators) -> np.ndarray:
    if isinstance(field_or_array, WaveField):
        if field_or_array.mesh is not operators.mesh:
            raise MeshMismatchError("field and operators live on different meshes")
        return field_or_array.values
    U = np.asarray(field_or_array)
    if U.shape != (operators.mesh.n_nodes,):
        raise MeshMismatchError(f"vector of shape {U.shape} does not match mesh with {operators.mesh.n_nodes} nodes")
    return U


def _check_mesh(mesh: Mesh, operators: AssembledOperators):
    if mesh is not operators.mesh:
        raise MeshMismatchError("mesh and operators do not match")


def quadrature_values(mesh: Mesh, U: np.ndarray) -> np.ndarray:
    """Values of the P1 interpolant at quadrature points, shape ``(n_cells, nq)``."""
    q = quadrature(mesh)
    return U[mesh.cells] @ q.shape.T


def integrate_density(mesh: Mesh, U: np.ndarray, weight: np.ndarray | None = None, power: int = 2) -> float:
    """``int w |psi_h|^power`` by per-cell quadrature (``weight`` given at quadrature points)."""
    q = quadrature(mesh)
    dens = np.abs(quadrature_values(mesh, U)) ** power
    if weight is not None:
        dens = dens * weight
    return float(np.sum(q.weights * dens))


def norm(field, operators: AssembledOperators, kind: str = "L2") -> float:
    """Discrete L2, full H1 or L4 norm of a P1 field."""
    U = _values(field, operators)
    if kind == "L2":
        return float(np.sqrt(max(np.real(np.vdot(U, operators.M @ U)), 0.0)))
    if kind == "H1":
        v = np.real(np.vdot(U, operators.M @ U)) + np.real(np.vdot(U, operators.S @ U))
        return float(np.sqrt(max(v, 0.0)))
    if kind == "L4":
        return integrate_density(operators.mesh, U, power=4) ** 0.25
    raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


def prolong(values: np.ndarray, mesh_pair: MeshPair) -> np.ndarray:
    """Nodal injection of a coarse P1 function into the fine space (exact)."""
    return mesh_pair.prolongation @ values


def restrict(values: np.ndarray, mesh_pair: MeshPair) -> np.ndarray:
    """Fine nodal values at the coarse nodes."""
    return np.asarray(values)[mesh_pair.coarse_to_fine]


def error_between(field_fine, field_other, operators_fine: AssembledOperators,
                  mesh_pair: MeshPair | None = None, kind: str = "L2") -> float:
    """Norm of the difference of two fields, measured on the fine mesh.

    ``field_other`` may live on the fine mesh or on the coarse mesh of
    ``mesh_pair``, in which case it is prolonged by nodal injection first.
    """
    fine = _values(field_fine, operators_fine)
    other = field_other.values if isinstance(field_other, WaveField) else np.asarray(field_other)
    other_mesh = field_other.mesh if isinstance(field_other, WaveField) else None
    if other.shape == fine.shape and (other_mesh is None or other_mesh is operators_fine.mesh):
        return norm(fine - other, operators_fine, kind)
    if mesh_pair is None or mesh_pair.fine is not operators_fine.mesh:
        raise MeshMismatchError("fields live on non-nested meshes; pass the matching MeshPair")
    if other.shape != (mesh_pair.coarse.n_nodes,) or (other_mesh is not None and other_mesh is not mesh_pair.coarse):
        raise MeshMismatchError("second field lives on neither the fine nor the coarse mesh of the pair")
    return norm(fine - prolong(other, mesh_pair), operators_fine, kind)


def nested_pair(mesh_coarse: Mesh, mesh_fine: Mesh) -> MeshPair:
    """Mesh pair for two independently built nested meshes."""
    from .mesh import build_mesh_pair  # local import keeps the module graph flat

    if mesh_coarse.dim != mesh_fine.dim or mesh_coarse.bounds != mesh_fine.bounds:
        raise MeshMismatchError("meshes cover different domains")
    ratios = {f // c for f, c in zip(mesh_fine.cells_per_axis, mesh_coarse.cells_per_axis)}
    if len(ratios) != 1 or any(f % c for f, c in zip(mesh_fine.cells_per_axis, mesh_coarse.cells_per_axis)):
        raise MeshMismatchError("meshes are not nested with a uniform ratio")
    return build_mesh_pair(mesh_fine, ratios.pop())


def coarse_error(coarse_values, ref_fine_values, mesh_pair: MeshPair,
                 operators_coarse: AssembledOperators, kind: str = "L2",
                 transfer: str = "nodal") -> float:
    """Error of a coarse-mesh field against a fine reference, measured on the coarse mesh.

    The reference is transferred to the coarse mesh either by nodal
    restriction (``"nodal"``) or by its weighted Clement coefficients
    ``(f, phi_p^H) / (1, phi_p^H)`` (``"clement"``).
    """
    if operators_coarse.mesh is not mesh_pair.coarse:
        raise MeshMismatchError("operators must live on the coarse mesh of the pair")
    ref = np.asarray(ref_fine_values)
    if transfer == "nodal":
        ref_c = restrict(ref, mesh_pair)
    elif transfer == "clement":
        from .msbasis import clement_interpolate

        ref_c = clement_interpolate(ref, mesh_pair)
    else:
        raise ValueError(f"unknown transfer {transfer!r}")
    return norm(np.asarray(coarse_values) - ref_c, operators_coarse, kind)
