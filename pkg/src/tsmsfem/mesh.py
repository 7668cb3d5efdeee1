"""Periodic structured meshes, nested coarse/fine pairs and coarse nodal patches.

Periodicity is realised by identifying boundary nodes with their partners,
so a mesh with ``n`` cells per axis carries exactly ``prod(n)`` independent
nodes.  Cells keep their true (unwrapped) vertex coordinates in
``cell_coords`` so that geometric quantities never see the wrap-around.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for invalid mesh or mesh-pair parameters."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform periodic simplicial mesh in 1D (intervals) or 2D (triangles).

    Attributes
    ----------
    dim : int
        Physical dimension, 1 or 2.
    bounds : tuple of (float, float)
        Domain interval per axis.
    cells_per_axis : tuple of int
        Number of cells per axis.
    nodes : ndarray, shape (n_nodes, dim)
        Coordinates of the independent nodes.
    cells : ndarray, shape (n_cells, dim + 1)
        Cell to node connectivity (indices into ``nodes``).
    cell_coords : ndarray, shape (n_cells, dim + 1, dim)
        Unwrapped vertex coordinates of every cell.
    periodic_map : ndarray
        Maps the index of each point of the full tensor grid (boundary
        duplicates included, x fastest) to its independent node.
    """

    dim: int
    bounds: tuple
    cells_per_axis: tuple
    nodes: np.ndarray = field(repr=False)
    cells: np.ndarray = field(repr=False)
    cell_coords: np.ndarray = field(repr=False)
    periodic_map: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def spacing(self) -> tuple:
        return tuple((b - a) / n for (a, b), n in zip(self.bounds, self.cells_per_axis))

    @property
    def h(self) -> float:
        """Characteristic mesh size (largest cell diameter)."""
        return float(np.sqrt(np.sum(np.square(self.spacing))))

    @property
    def measure(self) -> float:
        return float(np.prod([b - a for a, b in self.bounds]))

    @cached_property
    def cell_measures(self) -> np.ndarray:
        if self.dim == 1:
            return self.cell_coords[:, 1, 0] - self.cell_coords[:, 0, 0]
        e1 = self.cell_coords[:, 1] - self.cell_coords[:, 0]
        e2 = self.cell_coords[:, 2] - self.cell_coords[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def node_cells(self) -> sp.csr_matrix:
        """Boolean node-by-cell incidence matrix."""
        rows = self.cells.ravel()
        cols = np.repeat(np.arange(self.n_cells), self.dim + 1)
        data = np.ones(rows.size, dtype=bool)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_nodes, self.n_cells))

    def grid_index(self, *idx) -> np.ndarray:
        """Independent node index of tensor-grid point ``idx`` (wrapped)."""
        if self.dim == 1:
            return np.mod(idx[0], self.cells_per_axis[0])
        nx, ny = self.cells_per_axis
        return np.mod(idx[1], ny) * nx + np.mod(idx[0], nx)

    def signature(self) -> str:
        return f"{self.dim}|{self.bounds!r}|{self.cells_per_axis!r}"


def build_periodic_mesh(dim: int, bounds, cells_per_axis) -> Mesh:
    """Build a uniform periodic mesh.

    ``bounds`` is ``(a, b)`` in 1D or ``((ax, bx), (ay, by))`` in 2D (a single
    pair is broadcast to both axes).  ``cells_per_axis`` is an int or one int
    per axis.  In 2D every rectangle is cut along its bottom-right/top-left
    diagonal into a bottom-left and a top-right triangle.
    """
    if dim not in (1, 2):
        raise MeshError(f"dimension must be 1 or 2, got {dim}")
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim == 1:
        bounds = np.tile(bounds, (dim, 1))
    if bounds.shape != (dim, 2):
        raise MeshError(f"bounds must give one (lower, upper) pair per axis, got shape {bounds.shape}")
    n = np.atleast_1d(np.asarray(cells_per_axis, dtype=int))
    if n.size == 1:
        n = np.repeat(n, dim)
    if n.size != dim:
        raise MeshError(f"expected {dim} cell counts, got {n.size}")
    for ax in range(dim):
        if not bounds[ax, 1] > bounds[ax, 0]:
            raise MeshError(f"degenerate bounds on axis {ax}: {tuple(bounds[ax])}")
        if n[ax] < 2:
            raise MeshError(f"cells_per_axis must be >= 2 on axis {ax}, got {n[ax]}")
    bounds_t = tuple(tuple(float(v) for v in row) for row in bounds)
    n_t = tuple(int(v) for v in n)

    if dim == 1:
        (a, b), = bounds_t
        N, = n_t
        hx = (b - a) / N
        nodes = (a + hx * np.arange(N))[:, None]
        i = np.arange(N)
        cells = np.stack([i, (i + 1) % N], axis=1)
        x0 = a + hx * i
        cell_coords = np.stack([x0, x0 + hx], axis=1)[:, :, None]
        periodic_map = np.arange(N + 1) % N
    else:
        (ax_, bx_), (ay_, by_) = bounds_t
        nx, ny = n_t
        hx, hy = (bx_ - ax_) / nx, (by_ - ay_) / ny
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        nodes = np.stack([ax_ + hx * ii.ravel(), ay_ + hy * jj.ravel()], axis=1)
        i, j = ii.ravel(), jj.ravel()
        bl = j * nx + i
        br = j * nx + (i + 1) % nx
        tl = ((j + 1) % ny) * nx + i
        tr = ((j + 1) % ny) * nx + (i + 1) % nx
        cells = np.empty((2 * nx * ny, 3), dtype=int)
        cells[0::2] = np.stack([bl, br, tl], axis=1)
        cells[1::2] = np.stack([br, tr, tl], axis=1)
        x0, y0 = ax_ + hx * i, ay_ + hy * j
        p_bl = np.stack([x0, y0], axis=1)
        p_br = np.stack([x0 + hx, y0], axis=1)
        p_tl = np.stack([x0, y0 + hy], axis=1)
        p_tr = np.stack([x0 + hx, y0 + hy], axis=1)
        cell_coords = np.empty((2 * nx * ny, 3, 2))
        cell_coords[0::2] = np.stack([p_bl, p_br, p_tl], axis=1)
        cell_coords[1::2] = np.stack([p_br, p_tr, p_tl], axis=1)
        gj, gi = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
        periodic_map = ((gj % ny) * nx + gi % nx).ravel()

    for arr in (nodes, cells, cell_coords, periodic_map):
        arr.setflags(write=False)
    return Mesh(dim, bounds_t, n_t, nodes, cells, cell_coords, periodic_map)


@dataclass(frozen=True, eq=False)
class MeshPair:
    """Nested coarse/fine meshes with integer refinement ratio ``k``.

    ``coarse_to_fine[p]`` is the fine node sitting on coarse node ``p``;
    ``fine_cell_parent[c]`` is the coarse cell containing fine cell ``c``.
    """

    fine: Mesh
    coarse: Mesh
    k: int
    coarse_to_fine: np.ndarray = field(repr=False)
    fine_cell_parent: np.ndarray = field(repr=False)

    @cached_property
    def prolongation(self) -> sp.csr_matrix:
        """Sparse ``(N_h, N_H)`` matrix of coarse hat values at fine nodes."""
        return _prolongation(self)


def build_mesh_pair(mesh_fine: Mesh, ratio_k: int) -> MeshPair:
    """Pair ``mesh_fine`` with the mesh obtained by coarsening by ``ratio_k``.

    ``ratio_k = 1`` is accepted and yields the identity pairing (coarse mesh
    equal to the fine one), useful for degenerate checks of the multiscale
    construction.
    """
    k = int(ratio_k)
    if k < 1:
        raise MeshError(f"ratio_k must be a positive integer, got {ratio_k}")
    n = np.array(mesh_fine.cells_per_axis)
    for ax, na in enumerate(n):
        if na % k:
            raise MeshError(f"cells_per_axis[{ax}] = {na} is not divisible by ratio {k}")
        if na // k < 2:
            raise MeshError(
                f"coarse mesh would have {na // k} node(s) on axis {ax}; at least 2 are required"
            )
    coarse = build_periodic_mesh(mesh_fine.dim, mesh_fine.bounds, tuple(int(v) for v in n // k))
    if mesh_fine.dim == 1:
        c2f = k * np.arange(coarse.n_nodes)
        parent = np.arange(mesh_fine.n_cells) // k
    else:
        nx, ny = coarse.cells_per_axis
        Jc, Ic = np.divmod(np.arange(coarse.n_nodes), nx)
        c2f = mesh_fine.grid_index(k * Ic, k * Jc)
        # locate each fine triangle through its centroid, in coarse-cell local coordinates
        cen = mesh_fine.cell_coords.mean(axis=1)
        hx, hy = coarse.spacing
        sx = (cen[:, 0] - coarse.bounds[0][0]) / hx
        sy = (cen[:, 1] - coarse.bounds[1][0]) / hy
        I, J = np.floor(sx).astype(int), np.floor(sy).astype(int)
        upper = (sx - I) + (sy - J) > 1.0
        parent = 2 * (J * nx + I) + upper.astype(int)
    c2f.setflags(write=False)
    parent.setflags(write=False)
    return MeshPair(mesh_fine, coarse, k, c2f, parent)


def _prolongation(pair: MeshPair) -> sp.csr_matrix:
    fine, coarse, k = pair.fine, pair.coarse, pair.k
    if fine.dim == 1:
        N = fine.n_nodes
        i = np.arange(N)
        I, r = np.divmod(i, k)
        s = r / k
        rows = np.concatenate([i, i])
        cols = np.concatenate([I % coarse.n_nodes, (I + 1) % coarse.n_nodes])
        vals = np.concatenate([1.0 - s, s])
    else:
        nx, ny = fine.cells_per_axis
        j, i = np.divmod(np.arange(fine.n_nodes), nx)
        I, ri = np.divmod(i, k)
        J, rj = np.divmod(j, k)
        s, t = ri / k, rj / k
        bl = coarse.grid_index(I, J)
        br = coarse.grid_index(I + 1, J)
        tl = coarse.grid_index(I, J + 1)
        tr = coarse.grid_index(I + 1, J + 1)
        lower = s + t <= 1.0
        w_bl = np.where(lower, 1.0 - s - t, 0.0)
        w_br = np.where(lower, s, 1.0 - t)
        w_tl = np.where(lower, t, 1.0 - s)
        w_tr = np.where(lower, 0.0, s + t - 1.0)
        idx = np.arange(fine.n_nodes)
        rows = np.tile(idx, 4)
        cols = np.concatenate([bl, br, tl, tr])
        vals = np.concatenate([w_bl, w_br, w_tl, w_tr])
    P = sp.csr_matrix((vals, (rows, cols)), shape=(fine.n_nodes, coarse.n_nodes))
    P.eliminate_zeros()
    return P


@dataclass(frozen=True)
class NodalPatch:
    """Layer-``ell`` patch of coarse cells around coarse node ``p``."""

    p: int
    ell: int
    cells: frozenset

    def measure(self, mesh: Mesh) -> float:
        return float(mesh.cell_measures[sorted(self.cells)].sum()) if self.cells else 0.0


def nodal_patch(mesh_pair: MeshPair, p: int, ell: int) -> NodalPatch:
    """Patch ``D_ell`` of coarse cells around coarse node ``p``.

    ``D_0`` is the support of the coarse hat at ``p``; each further layer adds
    every coarse cell touching the closure of the previous one.
    """
    coarse = mesh_pair.coarse
    if not 0 <= p < coarse.n_nodes:
        raise IndexError(f"coarse node {p} out of range [0, {coarse.n_nodes})")
    if ell < 0:
        raise ValueError(f"patch layer must be nonnegative, got {ell}")
    nc = coarse.node_cells
    cells = set(nc[p].indices)
    for _ in range(ell):
        nodes = np.unique(coarse.cells[sorted(cells)].ravel())
        grown = set(np.unique(nc[nodes].indices))
        if grown == cells:
            break
        cells = grown
    return NodalPatch(int(p), int(ell), frozenset(int(c) for c in cells))
