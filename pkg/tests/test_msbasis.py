import numpy as np
import pytest

from tsmsfem.fem import assemble
from tsmsfem.mesh import build_mesh_pair, build_periodic_mesh
from tsmsfem.msbasis import (BasisError, MultiscaleBasis, build_basis, clement_interpolate, coarse_weights,
                             constraint_matrix, decay_profile, fitted_decay_ratio, project_operators,
                             reconstruct_fine)
from tsmsfem.propagate import StepperConfig, run


def _kernel_fields(basis, rng, n):
    """Random fine fields with vanishing Clement coefficients, L2-normalised."""
    ops_M = basis.mesh_pair.fine
    R = rng.standard_normal((basis.C.shape[0], n))
    W = R - basis.C @ clement_interpolate(R, basis.mesh_pair)
    return W / np.linalg.norm(W, axis=0)


def test_clement_constants_and_kernel(harmonic_pair, rng):
    pair, ops = harmonic_pair
    np.testing.assert_allclose(clement_interpolate(np.ones(pair.fine.n_nodes), pair), 1.0, atol=1e-13)
    basis = build_basis(ops, pair)
    W = _kernel_fields(basis, rng, 5)
    assert np.max(np.abs(clement_interpolate(W, pair))) <= 1e-8


def test_clement_of_coarse_hat(harmonic_pair):
    pair, _ = harmonic_pair
    q = 5
    coarse_M = assemble(pair.coarse, None, 1.0).M.toarray()
    got = clement_interpolate(pair.prolongation[:, q].toarray().ravel(), pair)
    np.testing.assert_allclose(got, coarse_M[:, q] / coarse_weights(pair), atol=1e-14)


def test_identity_pair_has_no_freedom():
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [8])
    pair = build_mesh_pair(mesh, 1)
    ops = assemble(mesh, None, 0.5)
    basis = build_basis(ops, pair)
    lam = coarse_weights(pair)
    M = ops.M.toarray()
    np.testing.assert_allclose(basis.C, np.linalg.solve(M, np.diag(lam)), atol=1e-12)
    co = project_operators(basis, ops)
    expected = np.diag(lam) @ np.linalg.inv(M) @ np.diag(lam)
    np.testing.assert_allclose(co.M, expected, atol=1e-12)


def test_partition_of_unity_without_potential():
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [256])
    pair = build_mesh_pair(mesh, 8)
    basis = build_basis(assemble(mesh, None, 1 / 16), pair)
    np.testing.assert_allclose(basis.C.sum(axis=1), 1.0, atol=1e-8)


def test_constraints_and_a_orthogonality(harmonic_pair, rng):
    pair, ops = harmonic_pair
    basis = build_basis(ops, pair)
    assert basis.constraint_residual() <= 1e-8
    B = constraint_matrix(pair)
    np.testing.assert_allclose(B @ basis.C, np.diag(basis.weights), atol=1e-8 * basis.weights.max())
    W = _kernel_fields(basis, rng, 20)
    assert np.max(np.abs(basis.C.T @ (ops.A @ W))) <= 1e-8


def test_two_dimensional_basis():
    mesh = build_periodic_mesh(2, [(0.0, 1.0)] * 2, [16, 16])
    pair = build_mesh_pair(mesh, 4)
    basis = build_basis(assemble(mesh, None, 0.25), pair)
    assert basis.constraint_residual() <= 1e-8
    np.testing.assert_allclose(basis.C.sum(axis=1), 1.0, atol=1e-8)


def test_operators_wrong_mesh(harmonic_pair):
    pair, _ = harmonic_pair
    other = assemble(build_periodic_mesh(1, [(-np.pi, np.pi)], [256]), None, 1 / 16)
    with pytest.raises(BasisError):
        build_basis(other, pair)


def test_projection_trivia(harmonic_pair):
    pair, ops = harmonic_pair
    basis = build_basis(ops, pair)
    co = project_operators(basis, ops)
    for X in (co.M, co.S, co.V):
        np.testing.assert_array_equal(X, X.T)
    assert np.linalg.eigvalsh(co.M).min() > 0
    zero = MultiscaleBasis(pair, np.zeros_like(basis.C), basis.weights, basis.eps)
    zc = project_operators(zero, ops)
    assert not zc.M.any() and not zc.S.any() and not zc.V.any()


def test_reconstruct(harmonic_pair, rng):
    pair, ops = harmonic_pair
    basis = build_basis(ops, pair)
    n = basis.n_coarse
    assert not reconstruct_fine(basis, np.zeros(n)).values.any()
    e = np.eye(n)[3]
    np.testing.assert_array_equal(reconstruct_fine(basis, e).values, basis.C[:, 3])
    u1, u2 = rng.standard_normal(n), rng.standard_normal(n)
    lhs = reconstruct_fine(basis, 2.5 * u1 + u2).values
    np.testing.assert_allclose(lhs, 2.5 * reconstruct_fine(basis, u1).values + reconstruct_fine(basis, u2).values,
                               atol=1e-13)
    with pytest.raises(ValueError):
        reconstruct_fine(basis, np.zeros(n + 1))


def test_unit_normalization_rescales_columns(harmonic_pair):
    pair, ops = harmonic_pair
    a = build_basis(ops, pair)
    b = build_basis(ops, pair, normalization="unit")
    np.testing.assert_allclose(b.C, a.C / a.weights, rtol=1e-8, atol=1e-8 * np.abs(b.C).max())


def test_linear_dynamics_independent_of_normalization(harmonic_pair):
    pair, ops = harmonic_pair
    u0 = np.exp(-10 * pair.fine.nodes[:, 0] ** 2).astype(complex)
    cfg = StepperConfig(scheme="SI", space="msfem", dt=0.05, eps=ops.eps, lam=0.0, n_steps=10, initial="l2")
    finals = []
    for norm_kind in ("mass", "unit"):
        b = build_basis(ops, pair, normalization=norm_kind)
        finals.append(run(cfg, u0, ops, b, project_operators(b, ops)).final.values)
    assert np.max(np.abs(finals[0] - finals[1])) <= 1e-8


def test_decay_profile():
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [512])
    pair = build_mesh_pair(mesh, 8)
    basis = build_basis(assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1 / 16), pair)
    tails, total = decay_profile(basis, 32, 40)
    assert np.all(np.diff(tails) <= 0)
    assert tails[0] <= total
    assert tails[-1] == 0.0
    pre = decay_profile(basis, 32, 8)[0]
    ratios = pre[1:] / pre[:-1]
    assert np.all(ratios < 1)
    assert fitted_decay_ratio(pre) < 1
