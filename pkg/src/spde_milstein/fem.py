"""Piecewise linear finite elements on a uniform mesh of (0, 1).

A grid function is the vector of interior nodal values (length ``n_cells - 1``);
leading axes are treated as batch axes (paths, time nodes) throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .spectral import EigenBasis, SQRT2, apply_semigroup


@dataclass(frozen=True)
class Mesh1D:
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError(f"need at least 2 cells, got {self.n_cells}")

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        """Number of interior (free) nodes."""
        return self.n_cells - 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_cells) * self.h


@dataclass(frozen=True)
class Quadrature:
    """Composite Gauss rule with ``n_sub`` sub-cells per element.

    Points are stored cell by cell with the same local layout in every cell,
    so interpolation and load assembly reduce to a gather and a small matrix
    product.  ``interp`` is the equivalent sparse nodal-to-point matrix.
    """

    points: np.ndarray
    weights: np.ndarray
    local: np.ndarray          # local coordinates in [0, 1) of one cell's points
    local_weights: np.ndarray  # matching weights
    n_cells: int

    @property
    def size(self) -> int:
        return self.points.size

    @cached_property
    def interp(self) -> sp.csr_matrix:
        npc = self.local.size
        n = self.n_cells - 1
        cell = np.repeat(np.arange(self.n_cells), npc)
        lam = np.tile(self.local, self.n_cells)
        q = np.arange(self.size)
        rows, cols, vals = [], [], []
        for node, val in ((cell, 1.0 - lam), (cell + 1, lam)):
            keep = (node >= 1) & (node <= n)
            rows.append(q[keep])
            cols.append(node[keep] - 1)
            vals.append(val[keep])
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, n))

    @cached_property
    def _shape_matrix(self) -> np.ndarray:
        # rows: left/right hat values at the local points
        return np.stack([1.0 - self.local, self.local])

    def to_points(self, c: np.ndarray, boundary=0.0) -> np.ndarray:
        """Evaluate grid functions ``c[..., n_nodes]`` at the quadrature points.

        ``boundary`` gives the value at both end nodes, as a scalar or an
        array aligned with the leading axes of ``c``; it is zero for members of ``V_h`` but not for
        interpolants of a Nemytskii coefficient ``b(x)`` with ``b(0) != 0``.
        """
        c = np.asarray(c, dtype=float)
        pad = np.empty(c.shape[:-1] + (self.n_cells + 1,))
        pad[..., 1:-1] = c
        edge = np.asarray(boundary, dtype=float)
        edge = edge.reshape(edge.shape + (1,) * (c.ndim - edge.ndim))
        pad[..., :1] = edge
        pad[..., -1:] = edge
        ends = np.lib.stride_tricks.sliding_window_view(pad, 2, axis=-1)  # (..., cells, 2)
        return (ends @ self._shape_matrix).reshape(c.shape[:-1] + (self.size,))

    def load(self, v: np.ndarray) -> np.ndarray:
        """Load vectors ``int v phi_i`` from point values ``v[..., n_points]``."""
        v = np.asarray(v, dtype=float)
        cells = v.reshape(v.shape[:-1] + (self.n_cells, self.local.size))
        parts = cells @ (self._shape_matrix * self.local_weights).T  # (..., cells, 2)
        return parts[..., 1:, 0] + parts[..., :-1, 1]


def gauss_quadrature(mesh: Mesh1D, n_sub: int = 1, n_gauss: int = 4) -> Quadrature:
    g, w = np.polynomial.legendre.leggauss(n_gauss)
    sub = (np.arange(n_sub)[:, None] + 0.5 * (g[None, :] + 1.0)) / n_sub
    local = sub.ravel()
    local_w = np.tile(0.5 * w / n_sub, n_sub) * mesh.h
    pts = ((np.arange(mesh.n_cells)[:, None] + local[None, :]) * mesh.h).ravel()
    wts = np.tile(local_w, mesh.n_cells)
    return Quadrature(pts, wts, local, local_w, mesh.n_cells)


def _tridiag_dense(diag: float, off: float, n: int) -> np.ndarray:
    return (np.diag(np.full(n, diag)) + np.diag(np.full(n - 1, off), 1)
            + np.diag(np.full(n - 1, off), -1))


@dataclass(frozen=True, eq=False)
class FemOperators:
    """Mass/stiffness pencil of a uniform mesh and the derived operators.

    ``P_h``, ``R_h`` and ``S_{k,h} = (I + k A_h)^{-1}`` are realised through
    banded Cholesky solves; factorizations of ``M + k K`` are cached per ``k``.
    """

    mesh: Mesh1D
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    @cached_property
    def mass_banded(self) -> np.ndarray:
        h, n = self.mesh.h, self.n
        ab = np.zeros((2, n))
        ab[0, 1:] = h / 6.0
        ab[1, :] = 2.0 * h / 3.0
        return ab

    @cached_property
    def stiffness_banded(self) -> np.ndarray:
        h, n = self.mesh.h, self.n
        ab = np.zeros((2, n))
        ab[0, 1:] = -1.0 / h
        ab[1, :] = 2.0 / h
        return ab

    @cached_property
    def mass(self) -> np.ndarray:
        h = self.mesh.h
        return _tridiag_dense(2 * h / 3, h / 6, self.n)

    @cached_property
    def stiffness(self) -> np.ndarray:
        h = self.mesh.h
        return _tridiag_dense(2 / h, -1 / h, self.n)

    @cached_property
    def _mass_factor(self):
        return sla.cholesky_banded(self.mass_banded)

    @cached_property
    def _stiff_factor(self):
        return sla.cholesky_banded(self.stiffness_banded)

    def _step_factor(self, k: float):
        fac = self._factors.get(k)
        if fac is None:
            fac = sla.cholesky_banded(self.mass_banded + k * self.stiffness_banded)
            self._factors[k] = fac
        return fac

    def prepare(self, *steps: float) -> "FemOperators":
        for k in steps:
            self._step_factor(k)
        return self

    # --- banded products and solves over the last axis -------------------
    @staticmethod
    def _banded_matvec(ab: np.ndarray, c: np.ndarray) -> np.ndarray:
        out = ab[1] * c
        out[..., :-1] += ab[0, 1:] * c[..., 1:]
        out[..., 1:] += ab[0, 1:] * c[..., :-1]
        return out

    @staticmethod
    def _solve(factor: np.ndarray, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        flat = b.reshape(-1, b.shape[-1]).T
        x = sla.cho_solve_banded((factor, False), flat, check_finite=False)
        return x.T.reshape(b.shape)

    def mass_matvec(self, c):
        return self._banded_matvec(self.mass_banded, np.asarray(c, dtype=float))

    def stiffness_matvec(self, c):
        return self._banded_matvec(self.stiffness_banded, np.asarray(c, dtype=float))

    def solve_mass(self, b):
        return self._solve(self._mass_factor, b)

    def solve_stiffness(self, b):
        return self._solve(self._stiff_factor, b)

    def solve_step(self, b, k: float):
        """``(M + k K)^{-1} b`` for load vectors ``b``."""
        return self._solve(self._step_factor(k), b)

    def step(self, c, k: float):
        """One backward Euler step ``(I + k A_h)^{-1} c``."""
        if k <= 0:
            raise ValueError(f"step size must be positive, got {k}")
        return self.solve_step(self.mass_matvec(c), k)

    def step_power(self, c, k: float, j: int):
        for _ in range(j):
            c = self.step(c, k)
        return c

    # --- norms -----------------------------------------------------------
    def h_norm(self, c):
        c = np.asarray(c, dtype=float)
        return np.sqrt(np.maximum(np.sum(c * self.mass_matvec(c), axis=-1), 0.0))

    def h1_norm(self, c):
        c = np.asarray(c, dtype=float)
        return np.sqrt(np.maximum(np.sum(c * self.stiffness_matvec(c), axis=-1), 0.0))

    # --- spectral coupling -------------------------------------------------
    def lift_matrix(self, n_modes: int) -> np.ndarray:
        """``L[j-1, i] = (phi_i, e_j)`` in closed form."""
        key = ("lift", n_modes)
        if key not in self._factors:
            h = self.mesh.h
            w = np.pi * np.arange(1, n_modes + 1)
            kernel = 2.0 * (1.0 - np.cos(w * h)) / (w * w * h)
            self._factors[key] = SQRT2 * np.sin(np.outer(w, self.mesh.nodes)) * kernel[:, None]
        return self._factors[key]

    def to_spectral(self, c, basis: EigenBasis) -> np.ndarray:
        """Coefficients ``(x_h, e_j)`` of grid functions (exact, truncated)."""
        return np.asarray(c, dtype=float) @ self.lift_matrix(basis.n_modes).T

    def project_spectral(self, x, basis: EigenBasis) -> np.ndarray:
        """``P_h`` of a spectral vector."""
        x = np.asarray(x, dtype=float)
        return self.solve_mass(x @ self.lift_matrix(basis.n_modes))

    def ritz_spectral(self, x, basis: EigenBasis) -> np.ndarray:
        """``R_h`` of a spectral vector: ``K c = ((x, phi_i)_1)_i``."""
        x = np.asarray(x, dtype=float)
        return self.solve_stiffness((x * basis.eigenvalues) @ self.lift_matrix(basis.n_modes))

    def project_function(self, fun, n_gauss: int = 4) -> np.ndarray:
        """``P_h`` of a point-evaluable function using Gauss quadrature per cell."""
        quad = gauss_quadrature(self.mesh, 1, n_gauss)
        return self.solve_mass(quad.load(np.asarray(fun(quad.points), dtype=float)))

    def distance_to_spectral(self, c, x, basis: EigenBasis):
        """``||x_h - x||_H`` for a grid function and a spectral vector."""
        c = np.asarray(c, dtype=float)
        x = np.asarray(x, dtype=float)
        sq = (np.sum(c * self.mass_matvec(c), axis=-1)
              - 2.0 * np.sum(self.to_spectral(c, basis) * x, axis=-1)
              + np.sum(x * x, axis=-1))
        return np.sqrt(np.maximum(sq, 0.0))

    # --- dense tools for small meshes --------------------------------------
    @cached_property
    def pencil(self):
        """Generalized eigenpairs of ``(K, M)``; columns M-orthonormal."""
        return sla.eigh(self.stiffness, self.mass)

    def discrete_power(self, c, rho: float) -> np.ndarray:
        """``A_h^rho c`` through the dense generalized eigendecomposition."""
        lam, V = self.pencil
        c = np.asarray(c, dtype=float)
        return (c @ self.mass @ V * lam ** rho) @ V.T


def prolongation(coarse: Mesh1D, fine: Mesh1D) -> sp.csr_matrix:
    """Exact embedding of coarse grid functions into a nested fine mesh."""
    if fine.n_cells % coarse.n_cells:
        raise ValueError(f"meshes not nested: {coarse.n_cells} -> {fine.n_cells}")
    xi = fine.nodes * coarse.n_cells
    cell = np.minimum(xi.astype(int), coarse.n_cells - 1)
    lam = xi - cell
    rows, cols, vals = [], [], []
    idx = np.arange(fine.n_nodes)
    for node, val in ((cell, 1.0 - lam), (cell + 1, lam)):
        keep = (node >= 1) & (node <= coarse.n_cells - 1) & (val > 0)
        rows.append(idx[keep])
        cols.append(node[keep] - 1)
        vals.append(val[keep])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(fine.n_nodes, coarse.n_nodes))


def prolong(c, coarse: Mesh1D, fine: Mesh1D) -> np.ndarray:
    if coarse == fine:
        return np.asarray(c, dtype=float)
    P = prolongation(coarse, fine)
    c = np.asarray(c, dtype=float)
    flat = c.reshape(-1, c.shape[-1])
    return (P @ flat.T).T.reshape(c.shape[:-1] + (fine.n_nodes,))


def assemble(mesh: Mesh1D, steps: tuple[float, ...] = ()) -> FemOperators:
    return FemOperators(mesh).prepare(*steps)


# --- continuous-time error operator -------------------------------------------

def _grid_index(t: float, k: float) -> int:
    """``j`` with ``t`` in ``[t_{j-1}, t_j)``."""
    return int(np.floor(t / k + 1e-12)) + 1


def error_operator(t: float, x, k: float, ops: FemOperators, basis: EigenBasis) -> np.ndarray:
    """Spectral coefficients of ``F_{k,h}(t) x = S_{k,h}(t) P_h x - S(t) x``."""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    c = ops.step_power(ops.project_spectral(x, basis), k, _grid_index(t, k))
    return ops.to_spectral(c, basis) - apply_semigroup(x, t, basis)


def error_operator_norm(t: float, x, k: float, ops: FemOperators, basis: EigenBasis) -> float:
    """``||F_{k,h}(t) x||`` evaluated exactly (no spectral truncation of ``V_h``)."""
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    c = ops.step_power(ops.project_spectral(x, basis), k, _grid_index(t, k))
    return float(ops.distance_to_spectral(c, apply_semigroup(x, t, basis), basis))


def integrated_error_operator_norm(x, k: float, T: float, ops: FemOperators,
                                   basis: EigenBasis) -> float:
    """``(int_0^T ||F_{k,h}(s) x||^2 ds)^{1/2}`` integrated in closed form.

    On ``[t_{j-1}, t_j)`` the discrete part is the constant ``u_j``, so the
    integrand is ``||u_j||^2 - 2 sum_m (u_j, e_m) x_m e^{-lam_m s} + sum_m x_m^2 e^{-2 lam_m s}``.
    """
    x = np.asarray(x, dtype=float)
    lam = basis.eigenvalues
    u = ops.project_spectral(x, basis)
    total = 0.0
    a = 0.0
    while a < T - 1e-14:
        b = min(a + k, T)
        u = ops.step(u, k)
        uu = float(u @ ops.mass_matvec(u))
        cross = ops.to_spectral(u, basis) * x
        e1 = (np.exp(-lam * a) - np.exp(-lam * b)) / lam
        e2 = (np.exp(-2 * lam * a) - np.exp(-2 * lam * b)) / (2 * lam)
        total += uu * (b - a) - 2.0 * float(cross @ e1) + float((x * x) @ e2)
        a = b
    return float(np.sqrt(max(total, 0.0)))
