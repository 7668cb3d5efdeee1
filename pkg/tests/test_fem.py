import numpy as np
import pytest

from tsmsfem.fem import (AssemblyError, MeshMismatchError, assemble, coarse_error, error_between, norm,
                         project_l2)
from tsmsfem.mesh import build_mesh_pair, build_periodic_mesh


def _gaussian(x):
    return (10 * np.pi) ** 0.25 * np.exp(-20 * x[:, 0] ** 2)


def test_line_entries():
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [10])
    ops = assemble(mesh, None, 0.1)
    h = 0.1
    M, S = ops.M.toarray(), ops.S.toarray()
    np.testing.assert_allclose(np.diag(M), 2 * h / 3)
    np.testing.assert_allclose(M[0, 1], h / 6)
    np.testing.assert_allclose(M[0, 9], h / 6)  # periodic wrap
    np.testing.assert_allclose(np.diag(S), 2 / h)
    np.testing.assert_allclose(S[0, 9], -1 / h)
    assert ops.V.nnz == 0


@pytest.mark.parametrize("dim, cells", [(1, [16]), (2, [6, 5])])
def test_unit_potential_reproduces_mass(dim, cells):
    mesh = build_periodic_mesh(dim, [(0.0, 1.0)] * dim, cells)
    ops = assemble(mesh, lambda x: np.ones(len(x)), 1.0)
    np.testing.assert_allclose(ops.V.toarray(), ops.M.toarray(), atol=1e-15)


@pytest.mark.parametrize("dim, cells", [(1, [16]), (2, [6, 5])])
def test_matrix_identities(dim, cells):
    mesh = build_periodic_mesh(dim, [(0.0, 2.0)] * dim, cells)
    ops = assemble(mesh, lambda x: np.sin(x[:, 0]) + 2.0, 1.0)
    for X in (ops.M, ops.S, ops.V):
        assert abs(X - X.T).max() == 0.0
    assert np.max(np.abs(ops.S.sum(axis=1))) <= 1e-12
    assert ops.M.sum() == pytest.approx(mesh.measure)
    assert np.linalg.eigvalsh(ops.M.toarray()).min() > 0


def test_affine_potential_exact_on_cells():
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [8])
    ops = assemble(mesh, lambda x: 3.0 + 2.0 * x[:, 0], 1.0)
    # (v phi_0, phi_1) on the cell [0, h]: integral of (3 + 2x)(1 - x/h)(x/h)
    h = 1 / 8
    exact = 3 * h / 6 + 2 * h**2 / 12
    assert ops.V[0, 1] == pytest.approx(exact, rel=1e-14)


def test_non_finite_potential_reports_cell():
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [8])
    with pytest.raises(AssemblyError, match="cell"):
        assemble(mesh, lambda x: np.where(x[:, 0] > 0.5, np.nan, 0.0), 1.0)


def test_projection_examples():
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [12])
    ops = assemble(mesh, None, 1.0)
    np.testing.assert_allclose(project_l2(lambda x: np.ones(len(x)), mesh, ops).values, 1.0, atol=1e-13)
    hat = lambda x: np.maximum(0.0, 1.0 - np.abs(x[:, 0] - mesh.nodes[3, 0]) * 12)  # noqa: E731
    np.testing.assert_allclose(project_l2(hat, mesh, ops).values, np.eye(12)[3], atol=1e-13)


def test_gaussian_mass_converges():
    prev = None
    for n in (256, 1024, 4096):
        mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [n])
        ops = assemble(mesh, None, 1.0)
        err = abs(norm(project_l2(_gaussian, mesh, ops), ops) ** 2 - np.pi / 2)
        if prev is not None:
            assert err < prev
        prev = err
    assert prev < 1e-6


def test_norms_of_constants_and_zero():
    mesh = build_periodic_mesh(2, [(0.0, 2.0), (0.0, 3.0)], [4, 6])
    ops = assemble(mesh, None, 1.0)
    z = np.zeros(mesh.n_nodes)
    assert all(norm(z, ops, k) == 0 for k in ("L2", "H1", "L4"))
    c = np.full(mesh.n_nodes, 2.0 - 1.0j)
    D = 6.0
    assert norm(c, ops, "L2") == pytest.approx(abs(2 - 1j) * np.sqrt(D))
    assert norm(c, ops, "H1") == pytest.approx(abs(2 - 1j) * np.sqrt(D))
    assert norm(c, ops, "L4") == pytest.approx(abs(2 - 1j) * D**0.25)


def test_sine_norms():
    mesh = build_periodic_mesh(1, [(0.0, 2 * np.pi)], [2048])
    ops = assemble(mesh, None, 1.0)
    u = np.sin(mesh.nodes[:, 0])
    assert norm(u, ops, "L2") == pytest.approx(np.sqrt(np.pi), rel=1e-5)
    assert norm(u, ops, "H1") == pytest.approx(np.sqrt(2 * np.pi), rel=1e-5)


def test_norm_rejects_mismatched_vector(line64):
    _, ops = line64
    with pytest.raises(MeshMismatchError):
        norm(np.zeros(10), ops)


def test_error_between_examples():
    fine = build_periodic_mesh(1, [(0.0, 2 * np.pi)], [512])
    ops = assemble(fine, None, 1.0)
    u = np.sin(fine.nodes[:, 0])
    assert error_between(u, u, ops) == 0.0
    errs = []
    for k in (16, 8):
        pair = build_mesh_pair(fine, k)
        assert error_between(np.ones(fine.n_nodes), np.ones(pair.coarse.n_nodes), ops, pair) == pytest.approx(0, abs=1e-13)
        errs.append(error_between(u, np.sin(pair.coarse.nodes[:, 0]), ops, pair))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_coarse_error_requires_coarse_operators():
    fine = build_periodic_mesh(1, [(0.0, 1.0)], [32])
    pair = build_mesh_pair(fine, 4)
    with pytest.raises(MeshMismatchError):
        coarse_error(np.zeros(8), np.zeros(32), pair, assemble(fine, None, 1.0))
    opc = assemble(pair.coarse, None, 1.0)
    assert coarse_error(np.ones(8), np.ones(32), pair, opc) == 0.0
