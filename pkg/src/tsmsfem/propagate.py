"""Strang time splitting for the cubic Schroedinger equation in FEM or MsFEM space.

Scheme ``SI`` splits off the cubic term only: half cubic phase, exact linear
flow with kinetic + potential energy (generalised eigendecomposition), half
cubic phase.  Scheme ``SII`` splits off potential and cubic term: half phase
with ``v + lam |U|^2``, Crank-Nicolson kinetic step, half phase.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import AssembledOperators, WaveField
from .msbasis import CoarseOperators, MultiscaleBasis, constraint_matrix

log = logging.getLogger(__name__)

SCHEMES = ("SI", "SII")
SPACES = ("fem", "msfem")


class PropagationError(RuntimeError):
    pass


class LargeStepWarning(UserWarning):
    pass


def rmatvec(A: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``A @ z`` for a real dense matrix and a complex vector without complex upcasting of ``A``."""
    z = np.ascontiguousarray(z, dtype=complex)
    out = A @ z.view(float).reshape(-1, 2)
    return np.ascontiguousarray(out).view(complex).ravel()


def phase_flow_cubic(U, tau: float, lam: float, eps: float) -> np.ndarray:
    """Exact flow of ``i eps u' = lam |u|^2 u`` over time ``tau``, nodewise."""
    U = np.asarray(U, dtype=complex)
    if lam == 0.0:
        return U.copy()
    return U * np.exp((-1j * lam * tau / eps) * (U.real**2 + U.imag**2))


def phase_flow_potential_cubic(U, v_nodal, tau: float, lam: float, eps: float) -> np.ndarray:
    """Exact flow of ``i eps u' = (v + lam |u|^2) u`` over time ``tau``, nodewise."""
    U = np.asarray(U, dtype=complex)
    v = np.asarray(v_nodal, dtype=float)
    if not np.all(np.isfinite(v)):
        raise PropagationError("non-finite nodal potential value")
    return U * np.exp((-1j * tau / eps) * (v + lam * (U.real**2 + U.imag**2)))


def _dense(X):
    return X.toarray() if sp.issparse(X) else np.asarray(X)


@dataclass(frozen=True, eq=False)
class EigenPropagator:
    """``M``-orthonormal eigenpairs of the pencil ``((eps^2/2) S [+ V], M)``."""

    P: np.ndarray = field(repr=False)
    Lam: np.ndarray = field(repr=False)
    PtM: np.ndarray = field(repr=False)
    eps: float


def eig_prepare(operators, with_potential: bool = True, check: bool = True) -> EigenPropagator:
    """Solve the symmetric-definite generalised eigenproblem of the linear Hamiltonian."""
    eps = operators.eps
    if with_potential:
        A = _dense(operators.A)
    else:
        A = 0.5 * eps**2 * _dense(operators.S)
    M = _dense(operators.M)
    if A.shape != M.shape:
        raise PropagationError(f"matrix shapes differ: {A.shape} vs {M.shape}")
    try:
        Lam, P = sla.eigh(A, M)
    except (sla.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(M) if M.shape[0] <= 2048 else float("nan")
        raise PropagationError(f"eigensolver failed for n={M.shape[0]}, cond(M)~{cond:.3e}: {exc}") from exc
    PtM = np.ascontiguousarray((M @ P).T)
    if check:
        n = P.shape[0]
        cols = np.unique(np.linspace(0, n - 1, min(n, 64)).astype(int))
        R = A @ P[:, cols] - (M @ P[:, cols]) * Lam[cols]
        scale = np.linalg.norm(A) * np.sqrt(cols.size / n)
        if np.linalg.norm(R) > 1e-8 * max(scale, 1e-300):
            raise PropagationError("generalised eigen-residual exceeds tolerance")
    return EigenPropagator(np.ascontiguousarray(P), Lam, PtM, eps)


def eig_apply(prop: EigenPropagator, U, dt: float, eps: float | None = None) -> np.ndarray:
    """Exact linear flow ``P exp(-i dt Lam / eps) P^T M U``."""
    eps = prop.eps if eps is None else eps
    c = rmatvec(prop.PtM, U)
    c *= np.exp((-1j * dt / eps) * prop.Lam)
    return rmatvec(prop.P, c)


@dataclass(frozen=True, eq=False)
class CnFactor:
    """Factorisation of ``i M - (dt eps / 4) S`` and the companion ``i M + (dt eps / 4) S``."""

    solve: Callable = field(repr=False)
    rhs: object = field(repr=False)
    lhs: object = field(repr=False)
    dt: float
    eps: float
    eig: tuple | None = field(default=None, repr=False)


def cn_prepare(operators, dt: float, eps: float | None = None) -> CnFactor:
    if not dt > 0:
        raise PropagationError(f"Crank-Nicolson step needs dt > 0, got {dt}")
    eps = operators.eps if eps is None else eps
    c = dt * eps / 4.0
    if sp.issparse(operators.M):
        lhs = (1j * operators.M - c * operators.S).tocsc()
        rhs = (1j * operators.M + c * operators.S).tocsr()
        try:
            lu = spla.splu(lhs)
        except RuntimeError as exc:
            raise PropagationError(f"Crank-Nicolson factorisation failed: {exc}") from exc
        solve = lu.solve
    else:
        # dense (coarse) matrices: apply the Cayley map in the eigenbasis of (S, M),
        # which costs two real matrix-vector products per step instead of a complex LU solve
        M = np.asarray(operators.M)
        S = np.asarray(operators.S)
        lhs = 1j * M - c * S
        rhs = 1j * M + c * S
        try:
            mu, P = sla.eigh(S, M)
        except (sla.LinAlgError, ValueError) as exc:
            raise PropagationError(f"Crank-Nicolson factorisation failed: {exc}") from exc
        cayley = (1j + c * mu) / (1j - c * mu)
        P = np.ascontiguousarray(P)
        PtM = np.ascontiguousarray((M @ P).T)
        # rhs is applied inside the Cayley factor, so expose it as the identity
        rhs = sp.identity(M.shape[0], dtype=complex, format="csr")

        def solve(b, P=P, PtM=PtM, cayley=cayley):
            return rmatvec(P, cayley * rmatvec(PtM, b))

        return CnFactor(solve, rhs, lhs, dt, eps, (P, PtM, cayley))
    return CnFactor(solve, rhs, lhs, dt, eps)


def cn_apply(factor: CnFactor, U) -> np.ndarray:
    return factor.solve(factor.rhs @ np.asarray(U, dtype=complex))


@dataclass
class StepperConfig:
    scheme: str = "SI"
    space: str = "fem"
    dt: float = 1e-3
    eps: float = 1.0 / 16.0
    lam: float = 0.0
    n_steps: int = 1000
    cadence: int = 0
    nonlinear: str = "coarse"
    compression: str = "l2"
    initial: str = "nodal"
    keep_trajectory: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.lam < 0:
            raise ValueError(f"nonlinearity coefficient must be >= 0, got {self.lam}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.nonlinear not in ("coarse", "reconstruct"):
            raise ValueError(f"unknown nonlinear substep mode {self.nonlinear!r}")
        if self.compression not in ("l2", "clement"):
            raise ValueError(f"unknown compression {self.compression!r}")
        if self.initial not in ("nodal", "l2"):
            raise ValueError(f"unknown initial transfer {self.initial!r}")

    @property
    def large_step(self) -> bool:
        return self.dt >= self.eps

    @property
    def T(self) -> float:
        return self.n_steps * self.dt


class Stepper:
    """One Strang step ``L2(dt/2) L1(dt) L2(dt/2)`` in the configured space.

    In the multiscale space the state is the coarse coefficient vector.  With
    the rescaled constraints the coefficients approximate nodal values, so by
    default (``nonlinear="coarse"``) the phase flows act on them directly, with
    ``v`` evaluated at the coarse nodes.  ``nonlinear="reconstruct"`` applies the
    phase to the fine field ``C U`` instead and compresses back with ``G``
    (``M``-orthogonal projection, or Clement coefficients).
    """

    def __init__(self, config: StepperConfig, operators: AssembledOperators,
                 basis: MultiscaleBasis | None = None, coarse: CoarseOperators | None = None,
                 linear=None):
        self.config = config
        self.ops = operators
        self.basis = basis
        self.coarse = coarse
        if config.large_step:
            warnings.warn(f"dt = {config.dt} >= eps = {config.eps}; outside the analysed step range",
                          LargeStepWarning, stacklevel=2)
        if abs(operators.eps - config.eps) > 1e-15 * max(1.0, config.eps):
            raise PropagationError("operators were assembled with a different eps")
        if config.space == "msfem":
            if basis is None or coarse is None:
                raise PropagationError("msfem space needs a basis and its coarse operators")
            self._C = np.ascontiguousarray(basis.C)
            self._G = None
            self._c2f = basis.mesh_pair.coarse_to_fine
            lin_ops = coarse
        else:
            lin_ops = operators
        self.v_nodal = operators.nodal_potential
        if config.space == "msfem" and config.nonlinear == "coarse":
            self.v_nodal = self.v_nodal[self._c2f]
        if linear is not None:
            self.linear = linear
        elif config.scheme == "SI":
            self.linear = eig_prepare(lin_ops, with_potential=True)
        else:
            self.linear = cn_prepare(lin_ops, config.dt, config.eps)

    # state <-> fine field
    def to_fine(self, state: np.ndarray) -> np.ndarray:
        return rmatvec(self._C, state) if self.config.space == "msfem" else state

    @property
    def G(self) -> np.ndarray:
        """Compression matrix from fine nodal values to coarse coefficients (built on demand)."""
        if self._G is None:
            if self.config.compression == "l2":
                CtM = np.asarray((self.ops.M @ self.basis.C).T)
                G = sla.cho_solve(self.coarse.mass_cho, CtM)
            else:
                B = constraint_matrix(self.basis.mesh_pair).toarray()
                G = B / self.basis.weights[:, None]
            self._G = np.ascontiguousarray(G)
        return self._G

    def compress(self, U_fine: np.ndarray) -> np.ndarray:
        if self.config.space == "msfem":
            return rmatvec(self.G, U_fine)
        return np.asarray(U_fine, dtype=complex)

    def initial_state(self, U0_fine: np.ndarray) -> np.ndarray:
        """Coarse coefficients from fine nodal data: values at coarse nodes, or ``G U0``."""
        U0 = np.asarray(U0_fine, dtype=complex)
        if self.config.space == "msfem" and self.config.initial == "nodal":
            return U0[self._c2f].copy()
        return self.compress(U0)

    def _half_phase(self, state: np.ndarray, tau: float) -> np.ndarray:
        cfg = self.config
        if cfg.scheme == "SI":
            if cfg.lam == 0.0:
                return state
            flow = lambda U: phase_flow_cubic(U, tau, cfg.lam, cfg.eps)  # noqa: E731
        else:
            flow = lambda U: phase_flow_potential_cubic(U, self.v_nodal, tau, cfg.lam, cfg.eps)  # noqa: E731
        if cfg.space == "msfem" and cfg.nonlinear == "reconstruct":
            return self.compress(flow(self.to_fine(state)))
        return flow(state)

    def _linear(self, state: np.ndarray, dt: float) -> np.ndarray:
        if self.config.scheme == "SI":
            return eig_apply(self.linear, state, dt, self.config.eps)
        if dt != self.linear.dt:
            raise PropagationError("Crank-Nicolson factor was prepared for a different step")
        return cn_apply(self.linear, state)

    def step(self, state: np.ndarray, dt: float | None = None) -> np.ndarray:
        dt = self.config.dt if dt is None else dt
        state = self._half_phase(state, 0.5 * dt)
        state = self._linear(state, dt)
        return self._half_phase(state, 0.5 * dt)


@dataclass
class RunResult:
    final: WaveField
    state: np.ndarray
    series: object = None
    trajectory: list | None = None


def run(config: StepperConfig, initial_field, operators: AssembledOperators,
        basis: MultiscaleBasis | None = None, coarse: CoarseOperators | None = None,
        observe: Callable | None = None, stepper: Stepper | None = None,
        initial_state: np.ndarray | None = None) -> RunResult:
    """Advance ``initial_field`` by ``config.n_steps`` Strang steps.

    ``observe(t, fine_values)`` is called at ``t = 0``, every ``cadence``
    steps and at the final time when ``cadence > 0``.
    """
    stepper = stepper or Stepper(config, operators, basis, coarse)
    U0 = initial_field.values if isinstance(initial_field, WaveField) else np.asarray(initial_field)
    state = stepper.initial_state(U0) if initial_state is None else np.asarray(initial_state, dtype=complex)
    traj = [state.copy()] if config.keep_trajectory else None
    cad = config.cadence
    if observe is not None and cad > 0:
        observe(0.0, stepper.to_fine(state))
    for n in range(1, config.n_steps + 1):
        state = stepper.step(state)
        if not np.all(np.isfinite(state)):
            raise PropagationError(f"non-finite values after step {n}")
        if traj is not None:
            traj.append(state.copy())
        if observe is not None and cad > 0 and (n % cad == 0 or n == config.n_steps):
            observe(n * config.dt, stepper.to_fine(state))
    final = WaveField(stepper.to_fine(state), operators.mesh, config.n_steps * config.dt)
    return RunResult(final, state, None, traj)


def _batched_rmatvec(A: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``A[b] @ Z[b]`` for real ``A`` of shape ``(B, n, k)`` and complex ``Z`` of shape ``(B, k)``."""
    Z = np.ascontiguousarray(Z, dtype=complex)
    out = np.matmul(A, Z.view(float).reshape(Z.shape[0], Z.shape[1], 2))
    return np.ascontiguousarray(out).view(complex).reshape(Z.shape[0], -1)


class BatchStepper:
    """Advance several independent multiscale trajectories in lock step.

    All steppers must share one configuration with ``space="msfem"`` and the
    coarse nonlinear substep; each keeps its own basis and spectrum.  The
    arithmetic per trajectory is the same as :meth:`Stepper.step`.
    """

    def __init__(self, steppers: Sequence[Stepper]):
        if not steppers:
            raise ValueError("need at least one stepper")
        cfg = steppers[0].config
        if cfg.space != "msfem" or cfg.nonlinear != "coarse":
            raise PropagationError("batched stepping needs the multiscale space with the coarse nonlinear substep")
        if any(st.config != cfg for st in steppers):
            raise PropagationError("all batched steppers must share one configuration")
        self.config = cfg
        self.steppers = list(steppers)
        if cfg.scheme == "SI":
            self.P = np.stack([st.linear.P for st in steppers])
            self.PtM = np.stack([st.linear.PtM for st in steppers])
            self.mult = np.exp((-1j * cfg.dt / cfg.eps) * np.stack([st.linear.Lam for st in steppers]))
            self.v = None
        else:
            self.P = np.stack([st.linear.eig[0] for st in steppers])
            self.PtM = np.stack([st.linear.eig[1] for st in steppers])
            self.mult = np.stack([st.linear.eig[2] for st in steppers])
            self.v = np.stack([st.v_nodal for st in steppers])
        self.C = np.stack([st._C for st in steppers])

    def initial_state(self, U0_fine) -> np.ndarray:
        return np.stack([st.initial_state(U0_fine) for st in self.steppers])

    def to_fine(self, states: np.ndarray) -> np.ndarray:
        return _batched_rmatvec(self.C, states)

    def _half_phase(self, U: np.ndarray, tau: float) -> np.ndarray:
        cfg = self.config
        if cfg.scheme == "SI":
            if cfg.lam == 0.0:
                return U
            return U * np.exp((-1j * cfg.lam * tau / cfg.eps) * (U.real**2 + U.imag**2))
        return U * np.exp((-1j * tau / cfg.eps) * (self.v + cfg.lam * (U.real**2 + U.imag**2)))

    def step(self, U: np.ndarray) -> np.ndarray:
        tau = 0.5 * self.config.dt
        U = self._half_phase(U, tau)
        U = _batched_rmatvec(self.P, self.mult * _batched_rmatvec(self.PtM, U))
        return self._half_phase(U, tau)

    def run(self, U0_fine, observe: Callable | None = None) -> np.ndarray:
        """Return the final coarse states; ``observe(t, fine_states)`` follows the cadence rule of :func:`run`."""
        cfg = self.config
        U = self.initial_state(U0_fine)
        cad = cfg.cadence
        if observe is not None and cad > 0:
            observe(0.0, self.to_fine(U))
        for n in range(1, cfg.n_steps + 1):
            U = self.step(U)
            if not np.all(np.isfinite(U)):
                bad = np.flatnonzero(~np.all(np.isfinite(U), axis=1))
                raise PropagationError(f"non-finite values after step {n} in trajectories {bad.tolist()}")
            if observe is not None and cad > 0 and (n % cad == 0 or n == cfg.n_steps):
                observe(n * cfg.dt, self.to_fine(U))
        return U
