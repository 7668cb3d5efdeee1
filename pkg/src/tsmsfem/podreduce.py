"""Offline/online reduced construction of multiscale bases for random potentials.

Offline, full bases are built for ``Q`` potential samples.  For every coarse
node the snapshot mean ``zeta_0`` and the leading ``m_p`` POD modes of the
fluctuations (``M``-weighted) are kept.  Online, each basis function is sought
in ``span{zeta_0, ..., zeta_mp}``: the constraints are met in the
least-squares sense and the energy ``a(phi, phi)`` is minimised over the
remaining freedom.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fem import AssembledOperators, assemble
from .mesh import MeshPair
from .msbasis import MultiscaleBasis, build_basis, coarse_weights, constraint_matrix
from .potential import PotentialModel, PotentialSample, affine_matrices, combine_affine, sample

log = logging.getLogger(__name__)

RANK_TOL = 1e-8
COND_TOL = 1e-6


class PodError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PodNodeBasis:
    p: int
    mean: np.ndarray = field(repr=False)
    modes: np.ndarray = field(repr=False)  # (m_p, N_h), M-orthonormal
    singular_values: np.ndarray = field(repr=False)

    @property
    def m_p(self) -> int:
        return self.modes.shape[0]

    @property
    def Z(self) -> np.ndarray:
        """Reduced space as columns ``[zeta_0, zeta_1, ...]``."""
        return np.column_stack([self.mean, *self.modes]) if self.m_p else self.mean[:, None]


@dataclass(eq=False)
class PodBasisSet:
    nodes: list
    Q: int
    mesh_pair: MeshPair
    eps: float
    model: PotentialModel | None = None
    offline_time: float = 0.0
    _affine: dict | None = field(default=None, repr=False)

    @property
    def m_p(self) -> int:
        return self.nodes[0].m_p if self.nodes else 0

    def signature(self) -> str:
        return pair_signature(self.mesh_pair)


def pair_signature(mesh_pair: MeshPair) -> str:
    text = f"{mesh_pair.fine.signature()}|k={mesh_pair.k}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _pod(X: np.ndarray, M: sp.spmatrix, m_p: int):
    """Leading ``m_p`` ``M``-orthonormal POD modes of the columns of ``X``."""
    if m_p == 0:
        return np.zeros((0, X.shape[0])), np.zeros(0)
    G = X.T @ (M @ X)
    G = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(G)
    w, V = w[::-1], V[:, ::-1]
    sv = np.sqrt(np.clip(w, 0.0, None))
    modes = np.zeros((m_p, X.shape[0]))
    scale = sv[0] if sv.size else 0.0
    for l in range(min(m_p, sv.size)):
        if sv[l] > 1e-12 * max(scale, 1e-300):
            modes[l] = X @ V[:, l] / sv[l]
    if scale == 0.0:
        log.info("fluctuation snapshots vanish; POD modes set to zero")
    out_sv = np.zeros(m_p)
    out_sv[: min(m_p, sv.size)] = sv[:m_p]
    return modes, out_sv


def offline_build(model: PotentialModel, offline_xi, mesh_pair: MeshPair, eps: float, m_p: int = 3) -> PodBasisSet:
    """Full bases for every offline sample, compressed per coarse node."""
    t0 = time.perf_counter()
    xis = np.atleast_2d(np.asarray(offline_xi, dtype=float))
    Q = xis.shape[0]
    if Q < m_p + 1:
        raise PodError(f"need Q >= m_p + 1 offline samples, got Q={Q}, m_p={m_p}")
    fine = mesh_pair.fine
    base = assemble(fine, None, eps)
    V0, Vj = affine_matrices(model, fine)
    NH = mesh_pair.coarse.n_nodes
    snaps = np.empty((NH, fine.n_nodes, Q))
    for q, xi in enumerate(xis):
        ops = AssembledOperators(fine, base.M, base.S, combine_affine(V0, Vj, xi), eps, sample(model, xi))
        C = build_basis(ops, mesh_pair).C
        snaps[:, :, q] = C.T
    nodes = []
    for p in range(NH):
        X = snaps[p]
        mean = X.mean(axis=1)
        modes, sv = _pod(X - mean[:, None], base.M, m_p)
        nodes.append(PodNodeBasis(p, mean, modes, sv))
    pod = PodBasisSet(nodes, Q, mesh_pair, eps, model, time.perf_counter() - t0)
    _prepare_affine(pod, base, V0, Vj)
    return pod


def _prepare_affine(pod: PodBasisSet, base: AssembledOperators, V0, Vj):
    """Offline part of the online solve.

    Per node: reduced energy matrices for each affine term of the potential,
    the least-squares constraint solution ``c_ls`` and a basis ``N`` of the
    null space of the reduced constraint matrix.  None of these depend on the
    online sample.
    """
    K = 0.5 * pod.eps**2 * base.S + V0
    Zs = np.stack([n.Z for n in pod.nodes])  # (N_H, N_h, m_p + 1)
    K0 = np.einsum("pnk,pnl->pkl", Zs, np.stack([K @ z for z in Zs]))
    Kj = np.stack([np.einsum("pnk,pnl->pkl", Zs, np.stack([Vk @ z for z in Zs])) for Vk in Vj]) \
        if len(Vj) else np.zeros((0,) + K0.shape)
    B = constraint_matrix(pod.mesh_pair)
    lam = coarse_weights(pod.mesh_pair)
    c_ls = np.empty((len(Zs), Zs.shape[2]))
    nulls, fallback = [], []
    for p, z in enumerate(Zs):
        target = np.zeros(lam.size)
        target[p] = lam[p]
        try:
            c_ls[p], Np = _lstsq_null(np.asarray(B @ z), target)
        except PodError:
            # rank-deficient reduced constraints: keep the mean at this node
            c_ls[p] = 0.0
            c_ls[p, 0] = 1.0
            Np = np.zeros((Zs.shape[2], 0))
            fallback.append(p)
        nulls.append(Np)
    if fallback:
        log.warning("reduced constraints vanish at %d node(s); using the mean basis there", len(fallback))
    groups = {}
    for p, Np in enumerate(nulls):
        groups.setdefault(Np.shape[1], []).append(p)
    # nodes sharing a null-space dimension are solved as one batch
    batches = [(np.array(idx), np.stack([nulls[p] for p in idx])) for d, idx in sorted(groups.items()) if d > 0]
    pod._affine = {"Z": Zs, "K0": K0, "Kj": Kj, "c_ls": c_ls, "batches": batches, "fallback": fallback}


def _lstsq_null(BZ: np.ndarray, target: np.ndarray):
    """Least-squares solution of ``BZ c = target`` and a basis of ``ker BZ`` (relative tolerance ``RANK_TOL``)."""
    U, s, Vt = np.linalg.svd(BZ, full_matrices=True)
    r = int(np.sum(s > RANK_TOL * max(s[0], 1e-300))) if s.size else 0
    if r == 0:
        raise PodError("reduced constraint matrix vanishes")
    c_ls = Vt[:r].T @ ((U[:, :r].T @ target) / s[:r])
    return c_ls, Vt[r:].T


def _minimize(K: np.ndarray, c_ls: np.ndarray, batches):
    """Minimise ``c^T K c`` over ``c_ls + ker`` for every node; returns coefficients and failed nodes.

    A node fails when the reduced energy on the constraint kernel is not safely
    positive definite (smallest eigenvalue below ``COND_TOL`` times the largest):
    the minimiser then does not exist or is dominated by round-off.
    """
    coef = c_ls.copy()
    failed = []
    for idx, N in batches:
        Kp = 0.5 * (K[idx] + K[idx].transpose(0, 2, 1))
        Kn = np.einsum("pki,pkl,plj->pij", N, Kp, N)
        g = np.einsum("pki,pkl,pl->pi", N, Kp, c_ls[idx])
        w, Q = np.linalg.eigh(Kn)
        scale = np.maximum(np.abs(w).max(axis=1), np.abs(Kp).max(axis=(1, 2)))
        scale = np.maximum(scale, 1e-300)[:, None]
        # vanishing POD modes make Kn singular; solve in its range
        winv = np.where(np.abs(w) > RANK_TOL * scale, 1.0 / np.where(w == 0, 1.0, w), 0.0)
        y = -np.einsum("pij,pj->pi", Q, winv * np.einsum("pji,pj->pi", Q, g))
        coef[idx] = c_ls[idx] + np.einsum("pij,pj->pi", N, y)
        bad = (w[:, 0] < COND_TOL * scale[:, 0]) & (np.abs(w) > RANK_TOL * scale).all(axis=1)
        bad |= w[:, 0] < -RANK_TOL * scale[:, 0]
        bad |= ~np.all(np.isfinite(coef[idx]), axis=1)
        failed.extend(int(p) for p in idx[bad])
    return coef, failed


def online_build(pod: PodBasisSet, potential_sample) -> MultiscaleBasis:
    """Reduced basis for a new potential sample (a ``PotentialSample`` or a coordinate vector)."""
    if pod._affine is None:
        raise PodError("offline set has no reduced operators; rebuild or reload it")
    aff = pod._affine
    if isinstance(potential_sample, PotentialSample):
        if pod.model is None or potential_sample.model is not pod.model:
            return _online_general(pod, potential_sample)
        xi = potential_sample.xi
        pot = potential_sample
    else:
        xi = np.asarray(potential_sample, dtype=float).ravel()
        if pod.model is None:
            raise PodError("coordinate vectors need the offline potential model")
        pot = sample(pod.model, xi)
    if xi.size != aff["Kj"].shape[0]:
        raise PodError(f"expected {aff['Kj'].shape[0]} random coordinates, got {xi.size}")
    K = aff["K0"] + np.tensordot(xi, aff["Kj"], axes=1)
    return _assemble_online(pod, K, pot)


def _online_general(pod: PodBasisSet, pot) -> MultiscaleBasis:
    ops = assemble(pod.mesh_pair.fine, pot, pod.eps)
    Zs = pod._affine["Z"]
    K = np.einsum("pnk,pnl->pkl", Zs, np.stack([ops.A @ z for z in Zs]))
    return _assemble_online(pod, K, pot)


def _assemble_online(pod: PodBasisSet, K: np.ndarray, pot) -> MultiscaleBasis:
    aff = pod._affine
    coef, failed = _minimize(K, aff["c_ls"], aff["batches"])
    if failed:
        log.warning("reduced energy is not positive definite at %d node(s); using the mean basis there", len(failed))
        coef[failed] = 0.0
        coef[failed, 0] = 1.0
    C = np.einsum("pnk,pk->np", aff["Z"], coef)
    return MultiscaleBasis(pod.mesh_pair, C, coarse_weights(pod.mesh_pair).copy(), pod.eps, pot, True)


def mean_basis(pod: PodBasisSet) -> MultiscaleBasis:
    C = np.column_stack([n.mean for n in pod.nodes])
    return MultiscaleBasis(pod.mesh_pair, C, coarse_weights(pod.mesh_pair).copy(), pod.eps, None, True)


def save(pod: PodBasisSet, path) -> tuple[Path, Path]:
    """Write ``<path>.npz`` with the node bases and ``<path>.json`` with the manifest."""
    path = Path(path)
    npz = path.with_suffix(".npz")
    man = path.with_suffix(".json")
    means = np.stack([n.mean for n in pod.nodes])
    modes = np.stack([n.modes for n in pod.nodes])
    svs = np.stack([n.singular_values for n in pod.nodes])
    np.savez(npz, means=means, modes=modes, singular_values=svs)
    manifest = {"mesh_pair": pod.signature(), "eps": pod.eps, "Q": pod.Q, "m_p": pod.m_p,
                "n_coarse": len(pod.nodes), "n_fine": int(means.shape[1]),
                "model_tag": pod.model.tag if pod.model is not None else None}
    man.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return npz, man


def load(path, mesh_pair: MeshPair, model: PotentialModel | None = None) -> PodBasisSet:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest["mesh_pair"] != pair_signature(mesh_pair):
        raise PodError("stored offline set was built on a different mesh pair")
    data = np.load(path.with_suffix(".npz"))
    nodes = [PodNodeBasis(p, data["means"][p], data["modes"][p], data["singular_values"][p])
             for p in range(manifest["n_coarse"])]
    pod = PodBasisSet(nodes, int(manifest["Q"]), mesh_pair, float(manifest["eps"]), model)
    base = assemble(mesh_pair.fine, None, pod.eps)
    if model is not None:
        V0, Vj = affine_matrices(model, mesh_pair.fine)
    else:
        V0, Vj = sp.csr_matrix(base.M.shape), []
    _prepare_affine(pod, base, V0, Vj)
    return pod
