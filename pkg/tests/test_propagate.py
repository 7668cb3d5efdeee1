import warnings

import numpy as np
import pytest

from tsmsfem.fem import assemble
from tsmsfem.mesh import build_mesh_pair, build_periodic_mesh
from tsmsfem.msbasis import build_basis, project_operators
from tsmsfem.propagate import (BatchStepper, LargeStepWarning, PropagationError, Stepper, StepperConfig,
                               cn_apply, cn_prepare, eig_apply, eig_prepare, phase_flow_cubic,
                               phase_flow_potential_cubic, run)


def _mass(U, M):
    return float(np.real(np.vdot(U, M @ U)))


def _random(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


@pytest.fixture(scope="module")
def harmonic():
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [128])
    return mesh, assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1 / 16)


def test_phase_flow_examples(rng):
    assert not phase_flow_cubic(np.zeros(3), 0.1, 1.0, 1.0).any()
    U = _random(rng, 6)
    np.testing.assert_array_equal(phase_flow_cubic(U, 0.3, 0.0, 0.1), U)
    assert phase_flow_cubic(np.array([1.0]), np.pi / 2, 1.0, 1.0)[0] == pytest.approx(-1j)
    out = phase_flow_cubic(U, 0.7, 3.0, 0.05)
    np.testing.assert_allclose(np.abs(out), np.abs(U), rtol=1e-15)


def test_potential_phase_examples(rng):
    U = _random(rng, 5)
    np.testing.assert_array_equal(phase_flow_potential_cubic(U, np.zeros(5), 0.2, 2.0, 0.1),
                                  phase_flow_cubic(U, 0.2, 2.0, 0.1))
    out = phase_flow_potential_cubic(U, np.full(5, 3.0), 0.2, 0.0, 0.1)
    np.testing.assert_allclose(out, np.exp(-1j * 0.2 * 3.0 / 0.1) * U)
    eps = 0.3
    got = phase_flow_potential_cubic(np.array([1.0, 1j]), np.array([np.pi, 0.0]), eps, 0.0, eps)
    np.testing.assert_allclose(got, [-1.0, 1j], atol=1e-15)
    with pytest.raises(PropagationError):
        phase_flow_potential_cubic(U, np.full(5, np.inf), 0.1, 0.0, 1.0)


def test_fourier_spectrum():
    N, eps = 32, 0.2
    mesh = build_periodic_mesh(1, [(0.0, 2 * np.pi)], [N])
    h = 2 * np.pi / N
    prop = eig_prepare(assemble(mesh, None, eps))
    k = np.arange(N)
    s = (2 - 2 * np.cos(2 * np.pi * k / N)) / h
    m = h * (2 + np.cos(2 * np.pi * k / N)) / 3
    np.testing.assert_allclose(prop.Lam, np.sort(0.5 * eps**2 * s / m), atol=1e-12)
    assert prop.Lam[0] == pytest.approx(0.0, abs=1e-12)
    c = prop.P[:, 0]
    np.testing.assert_allclose(c / c[0], 1.0, atol=1e-10)


def test_eigen_invariants(harmonic):
    mesh, ops = harmonic
    prop = eig_prepare(ops)
    M, A = ops.M.toarray(), ops.A.toarray()
    np.testing.assert_allclose(prop.P.T @ M @ prop.P, np.eye(mesh.n_nodes), atol=1e-10)
    assert np.linalg.norm(A @ prop.P - M @ prop.P * prop.Lam) <= 1e-8 * np.linalg.norm(A)


def test_eig_apply(harmonic, rng):
    mesh, ops = harmonic
    prop = eig_prepare(ops)
    U = _random(rng, mesh.n_nodes)
    np.testing.assert_allclose(eig_apply(prop, U, 0.0), U, atol=1e-12)
    two = eig_apply(prop, eig_apply(prop, U, 0.01), 0.01)
    np.testing.assert_allclose(two, eig_apply(prop, U, 0.02), atol=1e-10)
    free = eig_prepare(assemble(mesh, None, 1 / 16))
    np.testing.assert_allclose(eig_apply(free, np.ones(mesh.n_nodes), 0.3), 1.0, atol=1e-12)
    for _ in range(20):
        U = _random(rng, mesh.n_nodes)
        assert abs(_mass(eig_apply(prop, U, 0.05), ops.M) / _mass(U, ops.M) - 1) <= 1e-10


def test_crank_nicolson(harmonic, rng):
    mesh, ops = harmonic
    f = cn_prepare(ops, 0.01)
    np.testing.assert_allclose(cn_apply(f, np.ones(mesh.n_nodes)), 1.0, atol=1e-12)
    U = _random(rng, mesh.n_nodes)
    out = cn_apply(f, U)
    assert abs(_mass(out, ops.M) / _mass(U, ops.M) - 1) <= 1e-10
    c = 0.01 * ops.eps / 4
    res = (1j * ops.M - c * ops.S) @ out - (1j * ops.M + c * ops.S) @ U
    assert np.linalg.norm(res) <= 1e-12 * np.linalg.norm((1j * ops.M + c * ops.S) @ U)
    U = np.sin(mesh.nodes[:, 0]).astype(complex)
    d1 = np.linalg.norm(cn_apply(cn_prepare(ops, 1e-3), U) - U)
    d2 = np.linalg.norm(cn_apply(cn_prepare(ops, 5e-4), U) - U)
    assert d1 / d2 == pytest.approx(2.0, rel=0.02)
    with pytest.raises(PropagationError):
        cn_prepare(ops, 0.0)


def test_dense_crank_nicolson_matches_definition(harmonic, rng):
    mesh, ops = harmonic
    basis = build_basis(ops, build_mesh_pair(mesh, 4))
    co = project_operators(basis, ops)
    f = cn_prepare(co, 0.02)
    U = _random(rng, basis.n_coarse)
    out = cn_apply(f, U)
    c = 0.02 * co.eps / 4
    np.testing.assert_allclose((1j * co.M - c * co.S) @ out, (1j * co.M + c * co.S) @ U, atol=1e-11)


def test_linear_si_exact_in_time(harmonic):
    mesh, ops = harmonic
    u0 = np.exp(-10 * mesh.nodes[:, 0] ** 2).astype(complex)
    a = run(StepperConfig("SI", "fem", 0.1, 1 / 16, 0.0, 10), u0, ops).final.values
    b = run(StepperConfig("SI", "fem", 0.05, 1 / 16, 0.0, 20), u0, ops).final.values
    assert np.sqrt(_mass(a - b, ops.M)) <= 1e-9
    prop = eig_prepare(ops)
    np.testing.assert_allclose(a, eig_apply(prop, u0, 1.0), atol=1e-12)


@pytest.mark.parametrize("scheme", ["SI", "SII"])
def test_constant_state_is_stationary(scheme):
    mesh = build_periodic_mesh(1, [(0.0, 1.0)], [32])
    ops = assemble(mesh, None, 0.1)
    res = run(StepperConfig(scheme, "fem", 0.01, 0.1, 0.0, 50), np.ones(32, dtype=complex), ops)
    np.testing.assert_allclose(res.final.values, 1.0, atol=1e-12)


def test_time_reversal(harmonic):
    mesh, ops = harmonic
    u0 = np.exp(-10 * mesh.nodes[:, 0] ** 2).astype(complex)
    cfg = StepperConfig("SI", "fem", 1e-2, 1 / 16, 0.1, 20)
    st = Stepper(cfg, ops)
    U = u0.copy()
    for _ in range(20):
        U = st.step(U)
    for _ in range(20):
        U = st.step(U, -1e-2)
    assert np.max(np.abs(U - u0)) <= 1e-8


def test_nan_detection_and_warning(harmonic):
    mesh, ops = harmonic
    u0 = np.zeros(mesh.n_nodes, dtype=complex)
    u0[5] = np.nan
    with pytest.raises(PropagationError, match="step 1"):
        run(StepperConfig("SII", "fem", 1e-2, 1 / 16, 0.0, 3), u0, ops)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        Stepper(StepperConfig("SI", "fem", 0.1, 1 / 16, 0.0, 1), ops)
    assert any(issubclass(w.category, LargeStepWarning) for w in rec)


def test_cadence_and_trajectory(harmonic):
    mesh, ops = harmonic
    times = []
    cfg = StepperConfig("SII", "fem", 0.01, 1 / 16, 0.1, 10, cadence=4, keep_trajectory=True)
    res = run(cfg, np.ones(mesh.n_nodes), ops, observe=lambda t, U: times.append(t))
    np.testing.assert_allclose(times, [0.0, 0.04, 0.08, 0.1])
    assert len(res.trajectory) == 11


@pytest.mark.parametrize("scheme", ["SI", "SII"])
def test_batch_matches_single(harmonic, scheme):
    mesh, _ = harmonic
    pair = build_mesh_pair(mesh, 4)
    cfg = StepperConfig(scheme, "msfem", 0.02, 1 / 16, 1.0, 15)
    u0 = np.exp(-5 * mesh.nodes[:, 0] ** 2).astype(complex)
    steppers, singles = [], []
    for shift in (0.0, 0.3, -0.2):
        ops = assemble(mesh, lambda x, s=shift: 0.5 * (x[:, 0] - s) ** 2, 1 / 16)
        b = build_basis(ops, pair)
        st = Stepper(cfg, ops, b, project_operators(b, ops))
        steppers.append(st)
        singles.append(run(cfg, u0, ops, b, st.coarse, stepper=st).final.values)
    bs = BatchStepper(steppers)
    fine = bs.to_fine(bs.run(u0))
    np.testing.assert_allclose(fine, np.stack(singles), atol=1e-12)


def test_batch_rejects_reconstruct(harmonic):
    mesh, ops = harmonic
    b = build_basis(ops, build_mesh_pair(mesh, 4))
    cfg = StepperConfig("SI", "msfem", 0.02, 1 / 16, 1.0, 1, nonlinear="reconstruct")
    with pytest.raises(PropagationError):
        BatchStepper([Stepper(cfg, ops, b, project_operators(b, ops))])


def test_msfem_requires_basis(harmonic):
    _, ops = harmonic
    with pytest.raises(PropagationError):
        Stepper(StepperConfig("SI", "msfem", 0.01, 1 / 16, 0.0, 1), ops)
