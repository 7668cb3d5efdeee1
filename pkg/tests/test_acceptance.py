"""End-to-end acceptance criteria, run through the shipped experiment drivers.

Each test prints one ``PASS``/``FAIL`` line (also collected in the terminal
summary) and then asserts the criterion with the tolerances pinned below.
Run only this module with ``pytest tests/test_acceptance.py -s``.
"""
import numpy as np
import pytest

from tsmsfem.fem import assemble
from tsmsfem.harness import load_config
from tsmsfem.harness.analysis import fit_slope
from tsmsfem.harness.experiments import (localization_study, pod_bench, sample_ladder, space_ladder,
                                         time_ladder)
from tsmsfem.mesh import build_mesh_pair, build_periodic_mesh
from tsmsfem.msbasis import build_basis, clement_interpolate, decay_profile, fitted_decay_ratio
from tsmsfem.observables import mass
from tsmsfem.propagate import (Stepper, StepperConfig, cn_apply, cn_prepare, eig_apply, eig_prepare, phase_flow_cubic,
                               phase_flow_potential_cubic, run)

pytestmark = pytest.mark.acceptance

# harmonic potential, eps = 1/16, lam = 0.1, T = 1 on [-pi, pi]
HARMONIC = """
[domain]
lower = -pi
upper = pi
cells = {cells}
ratio = {ratio}
[physics]
eps = 1/16
lam = 0.1
T = 1
dt = {dt}
[scheme]
scheme = {scheme}
space = {space}
[potential]
kind = harmonic
"""


def _config(kind, body, **fmt):
    return load_config(text=f"[experiment]\nkind = {kind}\n" + body.format(**fmt))


def _report(log, label, passed, detail):
    print(f"\n{'PASS' if passed else 'FAIL'}  {label}: {detail}")
    log.append((label, bool(passed), detail))
    return passed


def _orders(rows):
    return {n: fit_slope(rows, n).slope for n in ("L2", "H1")}


# 1 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fem_space_orders():
    out = {}
    for scheme in ("SI", "SII"):
        cfg = _config("converge-space", HARMONIC + """
[convergence]
cells = 128, 256, 512, 1024
[reference]
cells = 4096
dt = 1e-4
scheme = SII
""", cells=4096, ratio=1, dt=1e-3, scheme=scheme, space="fem")
        out[scheme] = _orders(space_ladder(cfg).rows)
    return out


def test_criterion_1_fem_spatial_order(fem_space_orders, acceptance_log):
    ok = all(1.8 <= o <= 2.3 for d in fem_space_orders.values() for o in d.values())
    detail = ", ".join(f"{s} L2 {d['L2']:.3f} H1 {d['H1']:.3f}" for s, d in fem_space_orders.items())
    assert _report(acceptance_log, "1 FEM spatial order in [1.8, 2.3]", ok, detail)


# 2 ------------------------------------------------------------------------------

def test_criterion_2_temporal_order(acceptance_log):
    got = {}
    for scheme in ("SI", "SII"):
        cfg = _config("converge-time", HARMONIC + """
[convergence]
dts = 4e-2, 2e-2, 1e-2, 5e-3
[reference]
dt = 1e-4
""", cells=2048, ratio=1, dt=1e-2, scheme=scheme, space="fem")
        got[scheme] = fit_slope(time_ladder(cfg), "L2").slope
    ok = 1.85 <= got["SI"] <= 2.15 and 1.8 <= got["SII"] <= 2.15
    detail = f"SI {got['SI']:.3f} (need [1.85, 2.15]), SII {got['SII']:.3f} (need [1.8, 2.15])"
    assert _report(acceptance_log, "2 temporal L2 order", ok, detail)


# 3 ------------------------------------------------------------------------------

def _msfem_ladder(scheme, body, cells, coarse, **extra):
    cfg = _config("converge-space", body + f"\n[convergence]\ncoarse_cells = {coarse}\n",
                  cells=cells, ratio=1, dt=1e-3, scheme=scheme, space="msfem", **extra)
    return space_ladder(cfg)


@pytest.fixture(scope="module")
def msfem_ladders():
    return {s: _msfem_ladder(s, HARMONIC, 4096, "256, 512, 1024, 2048") for s in ("SI", "SII")}


def test_criterion_3_msfem_spatial_order(msfem_ladders, acceptance_log):
    lad = msfem_ladders["SI"]
    fine, coarse = _orders(lad.rows), _orders(lad.rows_coarse)
    ok = all(1.6 <= o <= 2.2 for o in (*fine.values(), *coarse.values()))
    detail = (f"SI fine L2 {fine['L2']:.3f} H1 {fine['H1']:.3f}, "
              f"coarse L2 {coarse['L2']:.3f} H1 {coarse['H1']:.3f}")
    assert _report(acceptance_log, "3a MsFEM SI orders in [1.6, 2.2]", ok, detail)


def test_criterion_3_sii_coarse_superconvergence(msfem_ladders, acceptance_log):
    lad = msfem_ladders["SII"]
    # ladder rows run from coarse to fine H
    finest = sorted(zip(lad.rows, lad.rows_coarse), key=lambda fc: fc[0].abscissa)[:2]
    ratios = [f.errors["L2"] / c.errors["L2"] for f, c in finest]
    ok = all(r >= 1e3 for r in ratios)
    detail = "fine/coarse L2 at the two finest H: " + ", ".join(f"{r:.3g}" for r in ratios)
    assert _report(acceptance_log, "3b SII coarse superconvergence >= 1e3", ok, detail)


# 4 ------------------------------------------------------------------------------

STEP = HARMONIC.replace("kind = harmonic", """kind = step
levels = 0, 1, 0
breakpoints = -5*2*pi/128, 5*2*pi/128
add_harmonic = 0.5""")


def test_criterion_4_discontinuous_potential(acceptance_log):
    got = {s: fit_slope(_msfem_ladder(s, STEP, 2048, "128, 256, 512, 1024").rows, "L2").slope
           for s in ("SI", "SII")}
    ok = got["SI"] >= 1.8 and got["SII"] <= 1.5
    detail = f"fine L2 order SI {got['SI']:.3f} (need >= 1.8), SII {got['SII']:.3f} (need <= 1.5)"
    assert _report(acceptance_log, "4 step-potential robustness", ok, detail)


# 5 ------------------------------------------------------------------------------

def test_criterion_5_conservation(acceptance_log):
    rng = np.random.default_rng(5)
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [2048])
    ops = assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1 / 16)
    eig, cn = eig_prepare(ops), cn_prepare(ops, 1e-3)
    worst_lin = 0.0
    worst_mod = 0.0
    for _ in range(100):
        U = rng.standard_normal(mesh.n_nodes) + 1j * rng.standard_normal(mesh.n_nodes)
        m0 = mass(U, ops)
        for out in (eig_apply(eig, U, 1e-3), cn_apply(cn, U)):
            worst_lin = max(worst_lin, abs(mass(out, ops) - m0) / m0)
        for out in (phase_flow_cubic(U, 1e-3, 0.1, 1 / 16),
                    phase_flow_potential_cubic(U, 0.5 * mesh.nodes[:, 0] ** 2, 1e-3, 0.1, 1 / 16)):
            worst_mod = max(worst_mod, float(np.max(np.abs(np.abs(out) - np.abs(U)) / np.abs(U))))
    u0 = ((10 * np.pi) ** 0.25 * np.exp(-20 * mesh.nodes[:, 0] ** 2)).astype(complex)
    res = run(StepperConfig("SI", "fem", 1e-3, 1 / 16, 0.1, 1000), u0, ops, stepper=None)
    drift = abs(mass(res.final.values, ops) - mass(u0, ops)) / mass(u0, ops)
    # floating-point exp(i theta) has unit modulus only to round-off, so "exact" means a few ulps
    mod_tol = 4 * np.finfo(float).eps
    ok = worst_lin <= 1e-10 and worst_mod <= mod_tol and drift <= 1e-4
    detail = (f"linear substep {worst_lin:.2e} (<= 1e-10), nodal modulus {worst_mod:.2e} (<= {mod_tol:.1e}), "
              f"SI mass drift h=2pi/2048 dt=1e-3 T=1: {drift:.3e} (<= 1e-4)")
    assert _report(acceptance_log, "5 conservation suite", ok, detail)


# 6 ------------------------------------------------------------------------------

def test_criterion_6_exact_linear_flow(acceptance_log):
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [1024])
    ops = assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1 / 16)
    u0 = ((10 * np.pi) ** 0.25 * np.exp(-20 * mesh.nodes[:, 0] ** 2)).astype(complex)
    eig = eig_prepare(ops)
    finals = []
    for dt in (1e-3, 5e-4):
        cfg = StepperConfig("SI", "fem", dt, 1 / 16, 0.0, int(round(1 / dt)))
        finals.append(run(cfg, u0, ops, stepper=Stepper(cfg, ops, linear=eig)).final.values)
    d = finals[0] - finals[1]
    err = float(np.sqrt(max(np.real(np.vdot(d, ops.M @ d)), 0.0)))
    assert _report(acceptance_log, "6 lam=0 SI step independence", err <= 1e-9, f"L2 difference {err:.2e} (<= 1e-9)")


# 7 ------------------------------------------------------------------------------

def test_criterion_7_basis_suite(acceptance_log):
    rng = np.random.default_rng(7)
    mesh = build_periodic_mesh(1, [(-np.pi, np.pi)], [2048])
    pair = build_mesh_pair(mesh, 8)
    ops = assemble(mesh, lambda x: 0.5 * x[:, 0] ** 2, 1 / 16)
    basis = build_basis(ops, pair)
    res = basis.constraint_residual()
    R = rng.standard_normal((mesh.n_nodes, 20))
    W = R - basis.C @ clement_interpolate(R, pair)
    W /= np.sqrt(np.einsum("ij,ij->j", W, ops.M @ W))
    a_orth = float(np.max(np.abs(basis.C.T @ (ops.A @ W))))
    free = build_basis(assemble(mesh, None, 1 / 16), pair)
    pou = float(np.max(np.abs(free.C.sum(axis=1) - 1.0)))
    tails, _ = decay_profile(basis, pair.coarse.n_nodes // 2, 8)
    ratio = fitted_decay_ratio(tails)
    monotone = bool(np.all(np.diff(tails) <= 0))
    ok = res <= 1e-8 * basis.weights.max() and a_orth <= 1e-8 and pou <= 1e-8 and monotone and ratio < 1
    detail = (f"constraint {res:.1e}, a-orthogonality {a_orth:.1e}, partition of unity {pou:.1e}, "
              f"decay monotone {monotone}, ratio {ratio:.3f}")
    assert _report(acceptance_log, "7 basis construction suite", ok, detail)


# 8 ------------------------------------------------------------------------------

def _sampled(kind, domain, cells, ratio, physics, potential, extra, scheme=""):
    return load_config(text=f"""
[experiment]
kind = {kind}
[domain]
lower = -{domain}
upper = {domain}
cells = {cells}
ratio = {ratio}
[physics]
eps = 1/8
{physics}
[scheme]
space = msfem
{scheme}
[potential]
kind = sine_series
sigma = 1
m = 5
{potential}
{extra}
""")


def test_criterion_8_qmc_vs_mc(acceptance_log):
    cfg = _sampled("converge-samples", "pi", 600, 6, "lam = 0.1\nT = 1\ndt = 1e-3", "beta = 2\nmean = 1", """
[sampling]
N = 1024
sizes = 64, 128, 256, 512, 1024
shifts = 4
reference_N = 8192
""")
    lad = sample_ladder(cfg)
    q = fit_slope(lad.per_method["qmc"], "L2").slope
    m = fit_slope(lad.per_method["mc"], "L2").slope
    ok = q <= -0.75 and q - m <= -0.25
    detail = f"qMC slope {q:.3f} (<= -0.75), MC slope {m:.3f}, gap {q - m:.3f} (<= -0.25)"
    assert _report(acceptance_log, "8 qMC vs MC rate separation", ok, detail)


# 9 ------------------------------------------------------------------------------

def test_criterion_9_pod_pipeline(acceptance_log):
    cfg = _sampled("pod-bench", "2", 600, 6, "lam = 1\nT = 10\ndt = 1e-2", "beta = 0\nmean = 0", """
[pod]
Q = 200
m_p = 3
online = 800
timing_samples = 8
""")
    pb = pod_bench(cfg)
    t = pb.times
    faster = t["online_basis"] < t["full_basis"]
    ordered = t["fem_per_sample"] > t["msfem_per_sample"] > t["pod_per_sample"]
    ok = pb.relative_deviation <= 0.05 and faster and ordered
    detail = (f"relative density deviation {pb.relative_deviation:.2e} (<= 5e-2), basis time online "
              f"{t['online_basis']:.2f}s vs full {t['full_basis']:.2f}s, per-sample FEM {t['fem_per_sample']:.3f}s "
              f"> MsFEM {t['msfem_per_sample']:.3f}s > POD {t['pod_per_sample']:.3f}s: {ordered}")
    assert _report(acceptance_log, "9 POD pipeline", ok, detail)


# 10 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def localization_runs():
    cfg = _sampled("localization", "2*pi", 1200, 4, "T = 20\ndt = 1e-2", "beta = 0\nmean = 0", """
[sampling]
N = 500
[localization]
lams = 0, 20
dt_linear = 0.1
window_start = 10
""", scheme="cadence = 0.5")
    return {r.lam: r for r in localization_study(cfg)}


def test_criterion_10_linear_band(localization_runs, acceptance_log):
    _, A = localization_runs[0.0].window(10.0)
    band = float(A.max() - A.min())
    detail = f"lam=0: A(t) in [{A.min():.4f}, {A.max():.4f}] on t in [10, 20], width {band:.4f} (<= 0.15)"
    assert _report(acceptance_log, "10a linear localization band", band <= 0.15, detail)


def test_criterion_10_nonlinear_growth(localization_runs, acceptance_log):
    r = localization_runs[20.0]
    _, A = r.window(10.0)
    ratio = float(A[-1] / A[0])
    detail = f"lam=20: A(10) {A[0]:.4f}, A(20) {A[-1]:.4f}, ratio {ratio:.3f} (>= 1.5)"
    assert _report(acceptance_log, "10b nonlinear delocalization ratio", ratio >= 1.5, detail)
