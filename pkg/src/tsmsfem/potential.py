"""Deterministic, multiscale and random potentials.

A :class:`PotentialModel` is affine in its random coordinates::

    v(x, xi) = mean(x) + sum_j scales[j] * xi[j] * modes[j](x)

Callables take points of shape ``(n, dim)`` and return ``(n,)`` real values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh import Mesh

log = logging.getLogger(__name__)

TAGS = (
    "harmonic", "multiscale_cos", "checkerboard", "sine_series_1d", "sine_series_2d",
    "kl_gaussian", "discontinuous_step", "custom",
)
SQRT3 = np.sqrt(3.0)


class PotentialError(ValueError):
    pass


def _zero(x):
    return np.zeros(np.shape(x)[0])


@dataclass(frozen=True, eq=False)
class PotentialModel:
    mean: Callable
    modes: tuple = ()
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tag: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=float)
        if scales.shape != (len(self.modes),):
            raise PotentialError(f"{len(self.modes)} modes but {scales.size} scales")
        if not np.all(np.isfinite(scales)):
            raise PotentialError("mode scales must be finite")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def m(self) -> int:
        return len(self.modes)

    def __call__(self, x):
        """Mean potential (all random coordinates zero)."""
        return np.asarray(self.mean(np.asarray(x, dtype=float)), dtype=float)

    def sup_bound(self, points) -> float:
        """Upper bound of ``|v|`` over the admissible cube, sampled at ``points``."""
        pts = np.asarray(points, dtype=float)
        bound = np.max(np.abs(self.mean(pts)))
        for s, mode in zip(self.scales, self.modes):
            bound += SQRT3 * s * np.max(np.abs(mode(pts)))
        return float(bound)


@dataclass(frozen=True, eq=False)
class PotentialSample:
    """A potential model with its random coordinates fixed."""

    model: PotentialModel
    xi: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        v = np.array(self.model.mean(x), dtype=float)
        for s, c, mode in zip(self.model.scales, self.xi, self.model.modes):
            if c != 0.0:
                v = v + (s * c) * mode(x)
        return v


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian covariance ``sigma2 * exp(-sum_i (x_i - y_i)^2 / (2 l_i^2))``."""

    sigma2: float
    lengths: tuple

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise PotentialError(f"kernel variance must be positive, got {self.sigma2}")
        if any(not l > 0 for l in self.lengths):
            raise PotentialError(f"correlation lengths must be positive, got {self.lengths}")

    def __call__(self, x, y):
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        l = np.asarray(self.lengths, dtype=float)
        d2 = np.zeros((x.shape[0], y.shape[0]))
        for i in range(x.shape[1]):
            d2 += (x[:, i, None] - y[None, :, i]) ** 2 / (2.0 * l[i] ** 2)
        return self.sigma2 * np.exp(-d2)


def sample(model: PotentialModel, xi) -> PotentialSample:
    xi = np.array(xi, dtype=float).ravel()
    if xi.size != model.m:
        raise PotentialError(f"model has {model.m} random coordinates, got {xi.size}")
    xi.setflags(write=False)
    return PotentialSample(model, xi)


def map_unit_to_xi(u) -> np.ndarray:
    """Map ``u`` in the unit cube to ``xi`` uniform on ``[-sqrt(3), sqrt(3)]``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0) or np.any(u > 1.0) or not np.all(np.isfinite(u)):
        raise PotentialError("unit-cube coordinates must lie in [0, 1]")
    return SQRT3 * (2.0 * u - 1.0)


def _require(params: dict, *names):
    missing = [n for n in names if n not in params]
    if missing:
        raise PotentialError(f"missing parameter(s): {', '.join(missing)}")


def _sine_series(params: dict, dim: int) -> PotentialModel:
    _require(params, "sigma", "beta", "m")
    sigma, beta, m = float(params["sigma"]), float(params["beta"]), int(params["m"])
    if m < 0:
        raise PotentialError("m must be nonnegative")
    shift = float(params.get("mean", 0.0))
    if dim == 1:
        modes = [(lambda x, j=j: np.sin(j * x[:, 0])) for j in range(1, m + 1)]
    else:
        modes = [(lambda x, j=j: np.sin(j * x[:, 0]) * np.sin(j * x[:, 1])) for j in range(1, m + 1)]
    scales = sigma / np.arange(1, m + 1, dtype=float) ** beta
    mean = (lambda x: np.full(np.shape(x)[0], shift)) if shift else _zero
    return PotentialModel(mean, modes, scales, f"sine_series_{dim}d", dict(params))


def _checkerboard(params: dict) -> PotentialModel:
    e1 = float(params.get("eps1", 1.0 / 8.0))
    e2 = float(params.get("eps2", 1.0 / 6.0))
    side = params.get("side", "left")

    def v(x):
        x1, x2 = x[:, 0], x[:, 1]
        if side == "left":
            lo1, lo2 = x1 <= 0.5, x2 <= 0.5
        else:
            lo1, lo2 = x1 < 0.5, x2 < 0.5
        in_diag = (lo1 & lo2) | (~lo1 & ~lo2)
        e = np.where(in_diag, e2, e1)
        v2 = (np.cos(2 * np.pi * x1 / e) + 1.0) * (np.cos(2 * np.pi * x2 / e) + 1.0)
        v1 = (x1 - 0.5) ** 2 + (x2 - 0.5) ** 2
        return v1 + v2

    return PotentialModel(v, tag="checkerboard", params={"eps1": e1, "eps2": e2, "side": side})


def step_potential(levels: Sequence[float], breakpoints: Sequence[float], side: str = "left") -> Callable:
    """Piecewise-constant 1D potential.

    ``levels[i]`` applies between ``breakpoints[i-1]`` and ``breakpoints[i]``.
    A point exactly on a breakpoint takes the value on ``side``.
    """
    levels = np.asarray(levels, dtype=float)
    bps = np.asarray(breakpoints, dtype=float)
    if levels.size != bps.size + 1:
        raise PotentialError("need exactly one more level than breakpoints")
    if np.any(np.diff(bps) <= 0):
        raise PotentialError("breakpoints must be strictly increasing")
    if side not in ("left", "right"):
        raise PotentialError(f"side must be 'left' or 'right', got {side!r}")
    # searchsorted 'left' puts x == bp into the interval below it
    ss = "left" if side == "left" else "right"

    def v(x):
        return levels[np.searchsorted(bps, x[:, 0], side=ss)]

    return v


def builtin(tag: str, params: dict | None = None) -> PotentialModel:
    """Construct one of the built-in potential families by tag."""
    params = dict(params or {})
    if tag == "harmonic":
        c = float(params.get("coefficient", 0.5))
        center = params.get("center")

        def v(x):
            y = x if center is None else x - np.asarray(center, dtype=float)
            return c * np.sum(y * y, axis=1)

        return PotentialModel(v, tag=tag, params={"coefficient": c, "center": center})
    if tag == "multiscale_cos":
        _require(params, "eps")
        e = float(params["eps"])

        def v(x):
            x1, x2 = x[:, 0], x[:, 1]
            return np.cos(x1 * x2 + x1 / e + x1 * x2 / e**2)

        return PotentialModel(v, tag=tag, params={"eps": e})
    if tag == "checkerboard":
        return _checkerboard(params)
    if tag == "sine_series_1d":
        return _sine_series(params, 1)
    if tag == "sine_series_2d":
        return _sine_series(params, 2)
    if tag == "discontinuous_step":
        _require(params, "levels", "breakpoints")
        v = step_potential(params["levels"], params["breakpoints"], params.get("side", "left"))
        return PotentialModel(v, tag=tag, params=dict(params))
    if tag == "custom":
        _require(params, "mean")
        modes = params.get("modes", ())
        return PotentialModel(params["mean"], modes, params.get("scales", np.ones(len(modes))), tag, {})
    if tag == "kl_gaussian":
        raise PotentialError("kl_gaussian models are built with kl_build(kernel, mesh, m)")
    raise PotentialError(f"unknown potential tag {tag!r}")


def _closed_grid(mesh: Mesh):
    """Tensor grid including both domain ends, with trapezoidal weights."""
    axes, weights = [], []
    for (a, b), n in zip(mesh.bounds, mesh.cells_per_axis):
        x = np.linspace(a, b, n + 1)
        w = np.full(n + 1, (b - a) / n)
        w[[0, -1]] *= 0.5
        axes.append(x)
        weights.append(w)
    if mesh.dim == 1:
        return axes[0][:, None], weights[0]
    X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
    WX, WY = np.meshgrid(weights[0], weights[1], indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=1), (WX * WY).ravel()


def kl_build(kernel: KernelSpec, mesh: Mesh, m: int, mean: Callable | None = None) -> PotentialModel:
    """Truncated Karhunen-Loeve model of a Gaussian-kernel random field.

    The covariance operator is discretised by the Nystrom method on the
    closed node grid with trapezoidal weights; modes are extended to
    arbitrary points by the Nystrom interpolation formula and normalised in
    the discrete L2 inner product.
    """
    if len(kernel.lengths) != mesh.dim:
        raise PotentialError(f"kernel has {len(kernel.lengths)} lengths for a {mesh.dim}D mesh")
    pts, w = _closed_grid(mesh)
    if not 0 <= m <= mesh.n_nodes:
        raise PotentialError(f"truncation order {m} must lie in [0, {mesh.n_nodes}]")
    sw = np.sqrt(w)
    K = kernel(pts, pts)
    Ks = sw[:, None] * K * sw[None, :]
    lam, vec = sla.eigh(Ks)
    lam, vec = lam[::-1], vec[:, ::-1]
    lam1 = lam[0]
    if lam[-1] < -1e-10 * lam1:
        raise PotentialError(f"kernel matrix has eigenvalue {lam[-1]:.3e} < -1e-10 * {lam1:.3e}")
    lam = np.clip(lam, 0.0, None)
    lam, vec = lam[:m], vec[:, :m]
    nodal = vec / sw[:, None]  # sum_i w_i v(x_i)^2 = 1

    modes = []
    for j in range(m):
        if lam[j] <= 0.0:
            modes.append(_zero)
            continue
        coef = w * nodal[:, j] / lam[j]
        modes.append(lambda x, coef=coef: kernel(x, pts) @ coef)
    model = PotentialModel(
        mean or _zero, modes, np.sqrt(lam), "kl_gaussian",
        {"sigma2": kernel.sigma2, "lengths": tuple(kernel.lengths), "eigenvalues": lam.copy(),
         "nodal_modes": nodal, "grid": pts, "weights": w},
    )
    return model


def affine_matrices(model: PotentialModel, mesh: Mesh):
    """Potential matrices of the mean and of every scaled mode on ``mesh``.

    ``V(xi) = V0 + sum_j xi_j Vj`` lets many samples be assembled without
    re-evaluating the modes.
    """
    from .fem import _local_weighted_mass, _scatter, evaluate_on_quadrature

    V0 = _scatter(mesh, _local_weighted_mass(mesh, evaluate_on_quadrature(mesh, model.mean)))
    Vj = [
        _scatter(mesh, _local_weighted_mass(mesh, s * evaluate_on_quadrature(mesh, mode)))
        for s, mode in zip(model.scales, model.modes)
    ]
    return V0, Vj


def combine_affine(V0: sp.spmatrix, Vj, xi) -> sp.csr_matrix:
    V = V0.copy()
    for c, Vk in zip(xi, Vj):
        V = V + c * Vk
    return V.tocsr()


def assumption_ratio(model_or_sample, mesh_pair, eps: float) -> float:
    """Diagnostic ``||v||_inf H^2 / eps^2`` evaluated on the fine nodes."""
    v = np.asarray(model_or_sample(mesh_pair.fine.nodes))
    return float(np.max(np.abs(v)) * mesh_pair.coarse.h**2 / eps**2)
