"""Experiment drivers: deterministic runs, convergence ladders, sampling studies.

Every driver takes a validated :class:`ExperimentConfig` and a ``timings``
dict, and returns an :class:`Outputs` bundle of deterministic results and
tables.  :func:`run_experiment` writes them through a staged output directory.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from ..fem import (AssembledOperators, AssemblyError, _local_weighted_mass, _scatter, assemble, coarse_error,
                   error_between, evaluate_on_quadrature, norm)
from ..mesh import build_mesh_pair, build_periodic_mesh
from ..msbasis import BasisError, build_basis, decay_profile, fitted_decay_ratio, project_operators
from ..observables import density_l2, pairwise_sum, recorder
from ..podreduce import PodError, mean_basis, offline_build, online_build
from ..potential import (PotentialModel, affine_matrices, builtin, combine_affine, map_unit_to_xi, sample)
from ..propagate import BatchStepper, PropagationError, Stepper, StepperConfig, eig_prepare, run
from ..sampling import (EstimationError, ladder_from_values, lattice_points, make_lattice_rule, mc_points,
                        read_vector_file)
from .analysis import ConvergenceRow, ExactMatchError, fit_slope
from .config import ConfigError, ExperimentConfig
from .emit import (CONVERGENCE_HEADER, LOCALIZATION_HEADER, StagedOutput, results_payload, write_csv,
                   write_json)

log = logging.getLogger(__name__)

NUMERICAL = (PropagationError, BasisError, EstimationError, PodError, AssemblyError, ExactMatchError,
             np.linalg.LinAlgError, FloatingPointError)


class HarnessError(RuntimeError):
    """A failure inside an experiment, tagged with the pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def numerical(self) -> bool:
        return isinstance(self.cause, NUMERICAL)


@contextmanager
def stage(name: str):
    try:
        yield
    except (HarnessError, ConfigError):
        raise
    except Exception as exc:
        raise HarnessError(name, exc) from exc


@dataclass
class Outputs:
    results: dict
    tables: dict = field(default_factory=dict)  # file name -> (header, rows)


# ---------------------------------------------------------------- setup helpers

def build_mesh(cfg: ExperimentConfig, cells=None):
    dom = cfg["domain"]
    cells = dom["cells"] if cells is None else cells
    if np.isscalar(cells):
        cells = (int(cells),) * dom["dim"]
    return build_periodic_mesh(dom["dim"], list(zip(dom["lower"], dom["upper"])), tuple(cells))


def potential_model(cfg: ExperimentConfig) -> PotentialModel:
    p, d = cfg["potential"], cfg["domain"]["dim"]
    kind = p["kind"]
    if kind == "zero":
        model = PotentialModel(lambda x: np.zeros(np.shape(x)[0]), tag="zero")
    elif kind == "harmonic":
        model = builtin("harmonic", {"coefficient": p["coefficient"]})
    elif kind == "sine_series":
        model = builtin(f"sine_series_{d}d", {"sigma": p["sigma"], "beta": p["beta"], "m": p["m"], "mean": p["mean"]})
    elif kind == "step":
        model = builtin("discontinuous_step", {"levels": p["levels"], "breakpoints": p["breakpoints"], "side": p["side"]})
    elif kind == "checkerboard":
        model = builtin("checkerboard", {"eps1": p["eps1"], "eps2": p["eps2"], "side": p["side"]})
    else:
        model = builtin("multiscale_cos", {"eps": p["oscillation"]})
    c = p["add_harmonic"]
    if c:
        base = model.mean
        model = PotentialModel(lambda x: base(x) + c * np.sum(x * x, axis=1), model.modes, model.scales,
                               model.tag, dict(model.params, add_harmonic=c))
    return model


def deterministic_potential(cfg: ExperimentConfig):
    """The configured potential with its random coordinates fixed (``xi`` or zero)."""
    model = potential_model(cfg)
    if model.m == 0:
        return model
    xi = cfg.get("potential", "xi")
    return sample(model, np.zeros(model.m) if xi is None else xi)


def initial_values(cfg: ExperimentConfig, mesh) -> np.ndarray:
    ph = cfg["physics"]
    if ph["initial"] == "constant":
        return np.full(mesh.n_nodes, ph["initial_amplitude"], dtype=complex)
    c = np.zeros(mesh.dim) if ph["initial_center"] is None else np.asarray(ph["initial_center"])
    r2 = np.sum((mesh.nodes - c) ** 2, axis=1)
    return (ph["initial_amplitude"] * np.exp(-ph["initial_width"] * r2)).astype(complex)


def _steps(T: float, dt: float) -> int:
    return int(round(T / dt))


def cadence_steps(cfg: ExperimentConfig, dt: float) -> int:
    cad = cfg.get("scheme", "cadence")
    if cad == 0:
        return 0
    k = cad / dt
    if abs(k - round(k)) > 1e-9 * k or round(k) < 1:
        raise ConfigError(f"cadence {cad} is not a whole number of steps of {dt}")
    return int(round(k))


def stepper_config(cfg: ExperimentConfig, **kw) -> StepperConfig:
    ph, sc = cfg["physics"], cfg["scheme"]
    dt = kw.pop("dt", ph["dt"])
    args = dict(scheme=sc["scheme"], space=sc["space"], dt=dt, eps=ph["eps"], lam=ph["lam"],
                n_steps=_steps(ph["T"], dt), cadence=0, nonlinear=sc["nonlinear"],
                initial=sc["initial_transfer"])
    args.update(kw)
    return StepperConfig(**args)


def domain_center(cfg: ExperimentConfig) -> np.ndarray:
    """Midpoint of the domain; second moments are measured from here (the origin on symmetric domains)."""
    dom = cfg["domain"]
    return 0.5 * (np.asarray(dom["lower"], dtype=float) + np.asarray(dom["upper"], dtype=float))


def second_moment_matrix(mesh, center=None):
    """Sparse matrix with ``U^* W U = int |x - center|^2 |u_h|^2`` (same quadrature as the observables)."""
    c = np.zeros(mesh.dim) if center is None else np.asarray(center, dtype=float)
    w = evaluate_on_quadrature(mesh, lambda x: np.sum((x - c) ** 2, axis=1))
    return _scatter(mesh, _local_weighted_mass(mesh, w))


# dense generalized eigendecompositions beyond this many fine nodes are out of budget
FEM_SI_NODE_LIMIT = 8192


def effective_space(cfg: ExperimentConfig, mesh) -> str:
    """The configured space, except that 2D fine-space SI above the node budget runs in the coarse space."""
    space = cfg.get("scheme", "space")
    if space == "fem" and cfg.get("scheme", "scheme") == "SI" and mesh.dim == 2 and mesh.n_nodes > FEM_SI_NODE_LIMIT:
        log.warning("2D fine-space SI with %d nodes is out of budget; using the multiscale space", mesh.n_nodes)
        return "msfem"
    return space


def _solve(cfg, mesh, pot, sc_cfg: StepperConfig, ratio: int = 1, ops=None, basis=None, coarse=None,
           observe=None, linear=None):
    """One trajectory in the FEM or MsFEM space; returns ``(result, ops, basis, coarse)``."""
    ops = ops or assemble(mesh, pot, sc_cfg.eps)
    if sc_cfg.space == "msfem" and basis is None:
        pair = build_mesh_pair(mesh, ratio)
        basis = build_basis(ops, pair)
        coarse = project_operators(basis, ops)
    st = Stepper(sc_cfg, ops, basis, coarse, linear=linear)
    res = run(sc_cfg, initial_values(cfg, mesh), ops, basis, coarse, observe=observe, stepper=st)
    return res, ops, basis, coarse


# ---------------------------------------------------------------- deterministic drivers

def simulate(cfg: ExperimentConfig, timings: dict) -> Outputs:
    with stage("setup"):
        mesh = build_mesh(cfg)
        pot = deterministic_potential(cfg)
        ops = assemble(mesh, pot, cfg.get("physics", "eps"))
        sc = stepper_config(cfg, space=effective_space(cfg, mesh))
        cad = cadence_steps(cfg, sc.dt) or sc.n_steps
        sc = replace(sc, cadence=cad)
        series, observe = recorder(ops, sc.lam, center=domain_center(cfg))
    t0 = time.perf_counter()
    with stage("propagation"):
        res, *_ = _solve(cfg, mesh, pot, sc, cfg.get("domain", "ratio"), ops=ops, observe=observe)
    timings["propagation"] = time.perf_counter() - t0
    arr = series.as_arrays()
    m0, e0 = arr["mass"][0], arr["energy"][0]
    results = {"final_mass": arr["mass"][-1], "final_energy": arr["energy"][-1],
               "mass_drift": abs(arr["mass"][-1] - m0) / m0,
               "energy_drift": abs(arr["energy"][-1] - e0) / max(abs(e0), 1e-300),
               "n_steps": sc.n_steps, "T": sc.T, "space": sc.space}
    dens = np.abs(res.final.values) ** 2
    cols = ("x",) if mesh.dim == 1 else ("x", "y")
    tables = {"observables.csv": (("t", "mass", "energy", "second_moment"),
                                  np.column_stack([arr["t"], arr["mass"], arr["energy"], arr["second_moment"]])),
              "density_final.csv": (cols + ("density",), np.column_stack([mesh.nodes, dens]))}
    return Outputs(results, tables)


def _rows_table(rows):
    return (CONVERGENCE_HEADER, [(r.abscissa, r.errors["L2"], r.errors["H1"]) for r in rows])


def _orders(rows) -> dict:
    out = {}
    for n in ("L2", "H1"):
        f = fit_slope(rows, n)
        out[n] = {"order": f.slope, "residual": f.residual}
    return out


@dataclass
class SpaceLadder:
    rows: list
    rows_coarse: list | None
    reference: np.ndarray
    reference_ops: AssembledOperators


def space_ladder(cfg: ExperimentConfig, timings: dict | None = None) -> SpaceLadder:
    """Spatial errors against a finer reference (FEM) or the fine FEM solution (MsFEM)."""
    timings = {} if timings is None else timings
    ph, sc, ref = cfg["physics"], cfg["scheme"], cfg["reference"]
    pot = deterministic_potential(cfg)
    ref_scheme = ref["scheme"] or sc["scheme"]
    if sc["space"] == "fem":
        ladder = sorted(cfg.get("convergence", "cells"))
        ref_cells = ref["cells"][0] if ref["cells"] else 4 * ladder[-1]
        ref_dt = ref["dt"] if ref["dt"] is not None else 1e-4
    else:
        ladder = sorted(cfg.get("convergence", "coarse_cells"))
        ref_cells = cfg.get("domain", "cells")[0]
        ref_dt = ref["dt"] if ref["dt"] is not None else ph["dt"]
    with stage("setup"):
        mref = build_mesh(cfg, ref_cells)
        ref_cfg = stepper_config(cfg, scheme=ref_scheme, space="fem", dt=ref_dt)
    t0 = time.perf_counter()
    with stage("reference"):
        rres, rops, *_ = _solve(cfg, mref, pot, ref_cfg)
    timings["reference"] = time.perf_counter() - t0
    uref = rres.final.values
    rows, rows_c = [], []
    t0 = time.perf_counter()
    with stage("ladder"):
        for n in ladder:
            pair = build_mesh_pair(mref, ref_cells // n)
            opc = assemble(pair.coarse, pot, ph["eps"])
            h = float(pair.coarse.h)
            if sc["space"] == "fem":
                res, *_ = _solve(cfg, pair.coarse, pot, stepper_config(cfg), ops=opc)
                rows.append(ConvergenceRow(h, {k: coarse_error(res.final.values, uref, pair, opc, k)
                                               for k in ("L2", "H1")}))
            else:
                basis = build_basis(rops, pair)
                coarse = project_operators(basis, rops)
                res, *_ = _solve(cfg, mref, pot, stepper_config(cfg), ops=rops, basis=basis, coarse=coarse)
                rows.append(ConvergenceRow(h, {k: error_between(uref, res.final.values, rops, kind=k)
                                               for k in ("L2", "H1")}))
                rows_c.append(ConvergenceRow(h, {k: coarse_error(res.state, uref, pair, opc, k)
                                                 for k in ("L2", "H1")}))
    timings["ladder"] = time.perf_counter() - t0
    return SpaceLadder(rows, rows_c or None, uref, rops)


def converge_space(cfg: ExperimentConfig, timings: dict) -> Outputs:
    lad = space_ladder(cfg, timings)
    with stage("fit"):
        results = {"rows": [{"abscissa": r.abscissa, **r.errors} for r in lad.rows], "orders": _orders(lad.rows)}
        tables = {"convergence.csv": _rows_table(lad.rows)}
        if lad.rows_coarse is not None:
            results["rows_coarse"] = [{"abscissa": r.abscissa, **r.errors} for r in lad.rows_coarse]
            results["orders_coarse"] = _orders(lad.rows_coarse)
            tables["convergence_coarse.csv"] = _rows_table(lad.rows_coarse)
    return Outputs(results, tables)


def time_ladder(cfg: ExperimentConfig, timings: dict | None = None) -> list:
    """Temporal errors on one mesh against a small-step reference of the same scheme and space."""
    timings = {} if timings is None else timings
    ref = cfg["reference"]
    ref_dt = ref["dt"] if ref["dt"] is not None else 1e-4
    sc_name = cfg.get("scheme", "scheme")
    with stage("setup"):
        mesh = build_mesh(cfg)
        pot = deterministic_potential(cfg)
        ops = assemble(mesh, pot, cfg.get("physics", "eps"))
        basis = coarse = None
        if cfg.get("scheme", "space") == "msfem":
            basis = build_basis(ops, build_mesh_pair(mesh, cfg.get("domain", "ratio")))
            coarse = project_operators(basis, ops)
        # the eigendecomposition does not depend on the step, so SI runs share it
        linear = eig_prepare(coarse if coarse is not None else ops) if sc_name == "SI" else None
    t0 = time.perf_counter()
    with stage("reference"):
        rres, *_ = _solve(cfg, mesh, pot, stepper_config(cfg, dt=ref_dt), ops=ops, basis=basis, coarse=coarse,
                          linear=linear)
    timings["reference"] = time.perf_counter() - t0
    rows = []
    t0 = time.perf_counter()
    with stage("ladder"):
        for dt in sorted(cfg.get("convergence", "dts")):
            res, *_ = _solve(cfg, mesh, pot, stepper_config(cfg, dt=dt), ops=ops, basis=basis, coarse=coarse,
                             linear=linear)
            rows.append(ConvergenceRow(dt, {k: norm(res.final.values - rres.final.values, ops, k)
                                            for k in ("L2", "H1")}))
    timings["ladder"] = time.perf_counter() - t0
    return rows


def converge_time(cfg: ExperimentConfig, timings: dict) -> Outputs:
    rows = time_ladder(cfg, timings)
    with stage("fit"):
        results = {"rows": [{"abscissa": r.abscissa, **r.errors} for r in rows], "orders": _orders(rows)}
    return Outputs(results, {"convergence.csv": _rows_table(rows)})


def basis_report(cfg: ExperimentConfig, timings: dict) -> Outputs:
    with stage("setup"):
        mesh = build_mesh(cfg)
        pair = build_mesh_pair(mesh, cfg.get("domain", "ratio"))
        ops = assemble(mesh, deterministic_potential(cfg), cfg.get("physics", "eps"))
    t0 = time.perf_counter()
    with stage("basis"):
        b = build_basis(ops, pair, include_potential=cfg.get("basis", "include_potential"))
    timings["basis"] = time.perf_counter() - t0
    with stage("decay"):
        p = cfg.get("basis", "node")
        p = pair.coarse.n_nodes // 2 if p is None else p
        if not 0 <= p < pair.coarse.n_nodes:
            raise ConfigError(f"basis node {p} outside 0..{pair.coarse.n_nodes - 1}")
        tails, total = decay_profile(b, p, cfg.get("basis", "ell_max"))
        ratio = fitted_decay_ratio(tails)
    results = {"constraint_residual": b.constraint_residual(), "node": p, "n_coarse": b.n_coarse,
               "gradient_norm": total, "decay_ratio": ratio,
               "partition_of_unity_defect": float(np.max(np.abs(b.C.sum(axis=1) - 1.0)))}
    tables = {"decay.csv": (("ell", "tail"), [(i, t) for i, t in enumerate(tails)]),
              "weights.csv": (("node", "weight"), [(q, w) for q, w in enumerate(b.weights)])}
    return Outputs(results, tables)


# ---------------------------------------------------------------- sampled drivers

@dataclass(eq=False)
class SampleSetup:
    """Everything shared by the per-sample multiscale runs of one configuration."""

    cfg: ExperimentConfig
    mesh: object
    pair: object
    base: AssembledOperators
    V0: object
    Vj: list
    model: PotentialModel
    u0: np.ndarray
    W2: object
    pod: object = None

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SampleSetup":
        mesh = build_mesh(cfg)
        pair = build_mesh_pair(mesh, cfg.get("domain", "ratio"))
        model = potential_model(cfg)
        base = assemble(mesh, None, cfg.get("physics", "eps"))
        V0, Vj = affine_matrices(model, mesh)
        return cls(cfg, mesh, pair, base, V0, Vj, model, initial_values(cfg, mesh),
                   second_moment_matrix(mesh, domain_center(cfg)))

    def operators(self, xi) -> AssembledOperators:
        return AssembledOperators(self.mesh, self.base.M, self.base.S, combine_affine(self.V0, self.Vj, xi),
                                  self.base.eps, sample(self.model, xi))


@dataclass
class RunSums:
    """Per-chunk sums for one stepper configuration."""

    t: np.ndarray
    A: np.ndarray
    mass: np.ndarray
    density: np.ndarray
    count: int
    samples: np.ndarray | None = None


def sample_chunk(setup: SampleSetup, xis: np.ndarray, runs, builder: str = "full",
                 keep_samples: bool = False, timings: dict | None = None) -> list:
    """Build bases for ``xis`` once and advance them under every configuration in ``runs``."""
    timings = {} if timings is None else timings
    items = []
    t0 = time.perf_counter()
    for xi in xis:
        ops = setup.operators(xi)
        tb = time.perf_counter()
        b = build_basis(ops, setup.pair) if builder == "full" else online_build(setup.pod, ops.potential)
        timings["basis"] = timings.get("basis", 0.0) + time.perf_counter() - tb
        co = project_operators(b, ops)
        E = eig_prepare(co) if any(r.scheme == "SI" for r in runs) else None
        items.append((ops, b, co, E))
    timings["prepare"] = timings.get("prepare", 0.0) + time.perf_counter() - t0
    out = []
    t0 = time.perf_counter()
    for rc in runs:
        sts = [Stepper(rc, ops, b, co, linear=E if rc.scheme == "SI" else None) for ops, b, co, E in items]
        bs = BatchStepper(sts)
        ts, A, mass = [], [], []

        def observe(t, F):
            FT = F.T
            ts.append(t)
            A.append(float(np.sum((np.conj(FT) * (setup.W2 @ FT)).real)))
            mass.append(float(np.sum((np.conj(FT) * (setup.base.M @ FT)).real)))

        final = bs.to_fine(bs.run(setup.u0, observe if rc.cadence > 0 else None))
        dens = final.real**2 + final.imag**2
        out.append(RunSums(np.array(ts), np.array(A), np.array(mass), pairwise_sum(dens), len(xis),
                           dens if keep_samples else None))
    timings["propagation"] = timings.get("propagation", 0.0) + time.perf_counter() - t0
    return out


_WORKER = {}


def _worker_chunk(args):
    xis, runs, builder, keep = args
    return sample_chunk(_WORKER["setup"], xis, runs, builder, keep)


def map_chunks(setup: SampleSetup, xis: np.ndarray, runs, builder: str = "full", keep_samples: bool = False,
               workers: int = 1, timings: dict | None = None) -> list:
    """Chunked evaluation; chunk boundaries depend only on the chunk size, so results do not depend on ``workers``."""
    size = setup.cfg.get("experiment", "chunk")
    chunks = [xis[i:i + size] for i in range(0, len(xis), size)]
    if workers <= 1 or len(chunks) <= 1 or "fork" not in mp.get_all_start_methods():
        return [sample_chunk(setup, c, runs, builder, keep_samples, timings) for c in chunks]
    # forked workers inherit the setup; potential modes are closures and cannot be pickled
    _WORKER["setup"] = setup
    try:
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("fork")) as ex:
            return list(ex.map(_worker_chunk, [(c, runs, builder, keep_samples) for c in chunks]))
    finally:
        _WORKER.pop("setup", None)


def _merge(chunk_results: list, j: int) -> RunSums:
    parts = [c[j] for c in chunk_results]
    count = sum(p.count for p in parts)
    t = parts[0].t
    A = pairwise_sum(np.stack([p.A for p in parts])) if t.size else t
    mass = pairwise_sum(np.stack([p.mass for p in parts])) if t.size else t
    dens = pairwise_sum(np.stack([p.density for p in parts]))
    samples = np.concatenate([p.samples for p in parts]) if parts[0].samples is not None else None
    return RunSums(t, A, mass, dens, count, samples)


def _workers(cfg: ExperimentConfig) -> int:
    return cfg.get("experiment", "workers")


def _unit_points(rule, shift: int) -> np.ndarray:
    return lattice_points(rule, shift)


def _lattice_rule(cfg: ExperimentConfig, N: int, R: int, seed: int):
    s = cfg["sampling"]
    m = cfg.get("potential", "m")
    if s["vector_file"]:
        mv, Nv, z = read_vector_file(s["vector_file"])
        if mv < m or Nv % N:
            raise ConfigError(f"vector file has m={mv}, N={Nv}; need m >= {m} and N divisible by {N}")
        return make_lattice_rule(m, N, R=R, seed=seed, z=z[:m])
    return make_lattice_rule(m, N, R=R, seed=seed, a=s["korobov"])


@dataclass
class SampleLadder:
    sizes: list
    reference: np.ndarray
    per_method: dict  # method -> list of ConvergenceRow


def sample_ladder(cfg: ExperimentConfig, timings: dict | None = None) -> SampleLadder:
    timings = {} if timings is None else timings
    s = cfg["sampling"]
    with stage("setup"):
        setup = SampleSetup.from_config(cfg)
        runs = [stepper_config(cfg)]
        sizes = sorted(s["sizes"])
        m = setup.model.m
    t0 = time.perf_counter()
    with stage("reference"):
        rrule = _lattice_rule(cfg, s["reference_N"], 1, s["reference_seed"])
        xis = map_unit_to_xi(_unit_points(rrule, 1))
        ref = _merge(map_chunks(setup, xis, runs, workers=_workers(cfg)), 0).density / len(xis)
    timings["reference"] = time.perf_counter() - t0
    methods = ("qmc", "mc") if s["method"] == "both" else (s["method"],)
    per = {}
    for meth in methods:
        t0 = time.perf_counter()
        with stage(f"sampling-{meth}"):
            vals = []
            for r in range(s["shifts"]):
                if meth == "qmc":
                    rule = _lattice_rule(cfg, s["N"], s["shifts"], s["seed"])
                    u = _unit_points(rule, r + 1)
                else:
                    u = mc_points(m, s["N"], s["mc_seed"], r)
                res = _merge(map_chunks(setup, map_unit_to_xi(u), runs, keep_samples=True, workers=_workers(cfg)), 0)
                vals.append(res.samples)
            lad = ladder_from_values(np.stack(vals), sizes, meth)
            rows = []
            for n in sizes:
                errs = {"L2": [], "H1": []}
                for q in lad[n]:
                    d = q - ref
                    errs["L2"].append(density_l2(d, setup.base))
                    errs["H1"].append(norm(d.astype(complex), setup.base, "H1"))
                rows.append(ConvergenceRow(float(n), {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in errs.items()}))
            per[meth] = rows
        timings[f"sampling_{meth}"] = time.perf_counter() - t0
    return SampleLadder(sizes, ref, per)


def converge_samples(cfg: ExperimentConfig, timings: dict) -> Outputs:
    lad = sample_ladder(cfg, timings)
    results, tables = {"sizes": lad.sizes}, {}
    with stage("fit"):
        for meth, rows in lad.per_method.items():
            results[meth] = {"rows": [{"abscissa": r.abscissa, **r.errors} for r in rows], "orders": _orders(rows)}
            tables[f"convergence_{meth}.csv"] = _rows_table(rows)
        if len(lad.per_method) == 2:
            results["slope_gap_L2"] = results["qmc"]["orders"]["L2"]["order"] - results["mc"]["orders"]["L2"]["order"]
    return Outputs(results, tables)


@dataclass
class PodBench:
    full_density: np.ndarray
    pod_density: np.ndarray
    relative_deviation: float
    online_residual: float
    mean_residual: float
    times: dict
    mesh: object


def pod_bench(cfg: ExperimentConfig, timings: dict | None = None) -> PodBench:
    """Full multiscale pipeline against the offline/online reduced pipeline on the same online samples."""
    timings = {} if timings is None else timings
    pd = cfg["pod"]
    Q, n_on = pd["Q"], pd["online"]
    with stage("setup"):
        setup = SampleSetup.from_config(cfg)
        rule = make_lattice_rule(setup.model.m, Q + n_on, R=1, seed=pd["lattice_seed"],
                                 a=cfg.get("sampling", "korobov"))
        xis = map_unit_to_xi(lattice_points(rule, 1))
        runs = [stepper_config(cfg)]
    t0 = time.perf_counter()
    with stage("offline"):
        setup.pod = offline_build(setup.model, xis[:Q], setup.pair, cfg.get("physics", "eps"), pd["m_p"])
    t_off = time.perf_counter() - t0
    tf, tp = {}, {}
    with stage("full"):
        full = _merge(map_chunks(setup, xis[Q:], runs, "full", timings=tf), 0)
    with stage("online"):
        red = _merge(map_chunks(setup, xis[Q:], runs, "pod", timings=tp), 0)
    with stage("residuals"):
        ops = setup.operators(xis[Q])
        online_res = online_build(setup.pod, ops.potential).constraint_residual()
        mean_res = mean_basis(setup.pod).constraint_residual()
    with stage("timing"):
        k = pd["timing_samples"]
        fem_cfg = stepper_config(cfg, space="fem")
        t0 = time.perf_counter()
        for xi in xis[Q:Q + k]:
            ops = setup.operators(xi)
            run(fem_cfg, setup.u0, ops, stepper=Stepper(fem_cfg, ops))
        fem_per_sample = (time.perf_counter() - t0) / k
    rho_full = full.density / full.count
    rho_pod = red.density / red.count
    dev = density_l2(rho_pod - rho_full, setup.base) / density_l2(rho_full, setup.base)
    times = {"offline": t_off, "full_basis": tf["basis"], "online_basis": tp["basis"],
             "full_total": tf["prepare"] + tf["propagation"],
             "pod_total": t_off + tp["prepare"] + tp["propagation"],
             "fem_per_sample": fem_per_sample}
    times["msfem_per_sample"] = times["full_total"] / n_on
    times["pod_per_sample"] = times["pod_total"] / n_on
    timings.update(times)
    return PodBench(rho_full, rho_pod, float(dev), online_res, mean_res, times, setup.mesh)


def pod_report(cfg: ExperimentConfig, timings: dict) -> Outputs:
    pb = pod_bench(cfg, timings)
    results = {"relative_deviation": pb.relative_deviation, "online_constraint_residual": pb.online_residual,
               "mean_constraint_residual": pb.mean_residual, "Q": cfg.get("pod", "Q"),
               "m_p": cfg.get("pod", "m_p"), "online": cfg.get("pod", "online")}
    cols = ("x",) if pb.mesh.dim == 1 else ("x", "y")
    tables = {"pod_density.csv": (cols + ("full_density", "pod_density"),
                                  np.column_stack([pb.mesh.nodes, pb.full_density, pb.pod_density]))}
    return Outputs(results, tables)


@dataclass
class LocalizationRun:
    lam: float
    t: np.ndarray
    A: np.ndarray
    mass: np.ndarray
    density: np.ndarray
    mesh: object = None

    def window(self, start: float):
        sel = self.t >= start - 1e-9
        return self.t[sel], self.A[sel]


def localization_study(cfg: ExperimentConfig, timings: dict | None = None) -> list:
    """Sample-averaged second moment ``A(t)`` and final expected density for every ``lam``."""
    timings = {} if timings is None else timings
    loc, ph = cfg["localization"], cfg["physics"]
    lams = loc["lams"] or (ph["lam"],)
    with stage("setup"):
        setup = SampleSetup.from_config(cfg)
        rule = _lattice_rule(cfg, cfg.get("sampling", "N"), 1, cfg.get("sampling", "seed"))
        xis = map_unit_to_xi(lattice_points(rule, 1))
        runs = []
        for lam in lams:
            dt = loc["dt_linear"] if lam == 0 and loc["dt_linear"] is not None else ph["dt"]
            runs.append(stepper_config(cfg, lam=lam, dt=dt, cadence=cadence_steps(cfg, dt)))
    with stage("propagation"):
        chunks = map_chunks(setup, xis, runs, workers=_workers(cfg), timings=timings)
    out = []
    for j, lam in enumerate(lams):
        s = _merge(chunks, j)
        out.append(LocalizationRun(lam, s.t, s.A / s.count, s.mass / s.count, s.density / s.count, setup.mesh))
    return out


def localization(cfg: ExperimentConfig, timings: dict) -> Outputs:
    runs = localization_study(cfg, timings)
    start = cfg.get("localization", "window_start")
    results, tables = {}, {}
    for r in runs:
        _, Aw = r.window(start)
        key = f"{r.lam:g}"
        results[key] = {"A_window_start": float(Aw[0]) if Aw.size else None, "A_final": float(r.A[-1]),
                        "ratio": float(r.A[-1] / Aw[0]) if Aw.size else None,
                        "band": float(Aw.max() - Aw.min()) if Aw.size else None,
                        "mass_final": float(r.mass[-1])}
        suffix = "" if len(runs) == 1 else f"_lam{key}"
        cols = ("x",) if r.mesh.dim == 1 else ("x", "y")
        tables[f"localization{suffix}.csv"] = (LOCALIZATION_HEADER, np.column_stack([r.t, r.A]))
        tables[f"density_final{suffix}.csv"] = (cols + ("expected_density",), np.column_stack([r.mesh.nodes, r.density]))
    return Outputs(results, tables)


DRIVERS = {"simulate": simulate, "converge-space": converge_space, "converge-time": converge_time,
           "converge-samples": converge_samples, "basis": basis_report, "pod-bench": pod_report,
           "localization": localization}


@dataclass
class ExperimentReport:
    manifest: dict
    results: dict
    timings: dict
    out_dir: object


def run_experiment(cfg: ExperimentConfig, out_dir) -> ExperimentReport:
    """Run the configured pipeline and write its files; nothing is left behind on failure."""
    timings: dict = {"workers": cfg.get("experiment", "workers")}
    out = StagedOutput(out_dir)
    t0 = time.perf_counter()
    try:
        outputs = DRIVERS[cfg.kind](cfg, timings)
        timings["total"] = time.perf_counter() - t0
        with stage("emit"):
            fmt = cfg.get("output", "format")
            if fmt in ("csv", "both"):
                for name, (header, rows) in outputs.tables.items():
                    write_csv(out.path(name), header, rows)
            payload = dict(outputs.results)
            if fmt in ("json", "both"):
                payload["tables"] = {name: {"header": list(h), "rows": np.asarray(rows, dtype=float)}
                                     for name, (h, rows) in outputs.tables.items()}
            write_json(out.path("results.json"), results_payload(cfg, payload))
            write_json(out.path("timings.json"), timings)
            man = out.commit()
    except BaseException:
        out.abort()
        raise
    return ExperimentReport(man, outputs.results, timings, out_dir)
