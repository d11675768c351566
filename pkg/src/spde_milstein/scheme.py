"""Milstein-Galerkin one-step schemes.

Every scheme here is an instance of the abstract recursion

    X(t_0) = xi_h,    X(t_n) = S_{k,h} X(t_{n-1}) + Phi(X(t_{n-1}), t_{n-1}, k)

with ``S_{k,h} = (I + k A_h)^{-1} P_h`` and an increment function ``Phi`` that
is explicit in the state.  States are batched: arrays of shape
``(paths, n_nodes)``; noise arrays are ``(paths, n_modes)`` per step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .fem import FemOperators, Mesh1D, assemble, gauss_quadrature
from .noise import IteratedIntegrals, TimeGrid, WienerPath
from .problem import ProblemSpec


class Variant(str, enum.Enum):
    MILSTEIN = "milstein"
    EULER = "em"
    TRUNCATED = "truncated"


class NumericalBlowUp(FloatingPointError):
    def __init__(self, step: int, variant: str = ""):
        super().__init__(f"non-finite state at step {step}" + (f" ({variant})" if variant else ""))
        self.step = step


@dataclass(frozen=True)
class SchemeConfig:
    variant: Variant
    grid: TimeGrid
    mesh: Mesh1D
    J: int | None = None
    levy_terms: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.TRUNCATED and (self.J is None or self.J < 1):
            raise ValueError("truncated variant needs J >= 1")

    def mode_counts(self, n_modes: int) -> tuple[int, int]:
        """Modes used by the Euler and the iterated-integral terms."""
        if self.variant is Variant.MILSTEIN:
            return n_modes, n_modes
        if self.variant is Variant.EULER:
            return n_modes, 0
        return min(self.J * self.J, n_modes), min(self.J, n_modes)


@dataclass
class GridProcess:
    """States ``states[path, n, node]`` at ``t_n = n k`` on ``mesh``."""

    states: np.ndarray
    grid: TimeGrid
    mesh: Mesh1D
    seed: int | None = None
    path_indices: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def restrict(self, factor: int) -> "GridProcess":
        """Restriction to the coarse time grid with step ``factor * k``."""
        if self.grid.n_steps % factor:
            raise ValueError(f"factor {factor} does not divide {self.grid.n_steps} steps")
        return GridProcess(self.states[:, ::factor], TimeGrid(self.grid.k * factor,
                           self.grid.n_steps // factor), self.mesh, self.seed, self.path_indices)


class Discretization:
    """Precomputed operators of one (problem, scheme configuration) pair.

    The noise enters through ``P_h`` of Nemytskii products, computed with a
    composite Gauss rule whose sub-cells resolve the highest noise mode, so
    modes above the mesh resolution are projected rather than aliased.
    """

    def __init__(self, problem: ProblemSpec, config: SchemeConfig,
                 ops: FemOperators | None = None, n_gauss: int = 4,
                 resolution: int | None = None):
        self.problem = problem
        self.config = config
        self.k = config.grid.k
        self.ops = ops if ops is not None else assemble(config.mesh)
        if self.ops.mesh != config.mesh:
            raise ValueError("operators assembled for a different mesh")
        self.ops.prepare(self.k)
        n_modes = problem.n_modes
        self.j_euler, self.j_mil = config.mode_counts(n_modes)
        # ``resolution`` = number of quadrature sub-cells on (0, 1); sharing it
        # between nested meshes lets them share noise fields point by point.
        if resolution is None:
            resolution = config.mesh.n_cells * max(1, -(-n_modes // config.mesh.n_cells))
        if resolution % config.mesh.n_cells:
            raise ValueError(f"resolution {resolution} not a multiple of {config.mesh.n_cells}")
        n_sub = resolution // config.mesh.n_cells
        self.quad = gauss_quadrature(config.mesh, n_sub, n_gauss)
        self.modal = (problem.basis.matrix(self.quad.points, n_modes)
                      * problem.covariance.sqrt_eigenvalues[:, None])
        self.modal_sq_sum = (self.modal[: self.j_mil] ** 2).sum(axis=0)
        self.noiseless = problem.diffusion.b.name == "zero"
        self.additive = problem.diffusion.is_additive
        # x vanishes on the boundary, so b(x) there equals b(0)
        b = problem.diffusion.b
        b0 = float(b(np.zeros(1))[0])
        self._edge = b0
        self._edge_both = np.array([b0, float(b.deriv(np.zeros(1))[0]) * b0])

    @cached_property
    def xi(self) -> np.ndarray:
        """``xi_h = P_h X_0``."""
        return self.ops.project_spectral(self.problem.x0, self.problem.basis)

    # --- noise fields at quadrature points --------------------------------
    def noise_fields(self, dW: np.ndarray):
        """Point values of ``sum_j sqrt(mu_j) dW_j e_j`` for the Euler and Milstein mode sets."""
        dW = np.asarray(dW, dtype=float)
        w_e = dW[..., : self.j_euler] @ self.modal[: self.j_euler]
        if self.j_mil == 0:
            return w_e, None
        if self.j_mil == self.j_euler:
            return w_e, w_e
        return w_e, dW[..., : self.j_mil] @ self.modal[: self.j_mil]

    def milstein_field(self, iterated: IteratedIntegrals | np.ndarray) -> np.ndarray:
        """``sum_{i,j} sqrt(mu_i mu_j) I_(j,i) e_i e_j`` at quadrature points."""
        I = iterated.values if isinstance(iterated, IteratedIntegrals) else np.asarray(iterated)
        J = I.shape[-1]
        if J < self.j_mil:
            raise ValueError(f"iterated integrals cover {J} modes, scheme needs {self.j_mil}")
        E = self.modal[: self.j_mil]
        I = I[..., : self.j_mil, : self.j_mil]
        return np.einsum("...ji,iq,jq->...q", I, E, E)

    # --- the increment function -------------------------------------------
    def load_parts(self, x, dW, iterated=None, fields=None):
        """Drift load ``-k M f(x)`` and noise load (Ito plus Milstein terms), separately.

        Without ``iterated`` the double integral uses the commutative identity
        ``sum_{ij} a_i a_j I_(j,i) = ((sum_j a_j dW_j)^2 - k sum_j a_j^2) / 2``,
        exact for Nemytskii ``g`` since the Levy areas cancel in the symmetric sum.
        """
        x = np.asarray(x, dtype=float)
        p = self.problem
        drift = -self.k * self.ops.mass_matvec(p.drift.b(x))
        if self.noiseless:
            return drift, np.zeros_like(drift)
        w_e, w_m = self.noise_fields(dW) if fields is None else fields
        b = p.diffusion.b
        bx = b.fun(x)
        if self.j_mil and not self.additive:
            if iterated is None:
                mil = w_m * w_m
                mil -= self.k * self.modal_sq_sum
                mil *= 0.5
            else:
                mil = self.milstein_field(iterated)
            both = self.quad.to_points(np.stack([bx, b.deriv(x) * bx]), self._edge_both)
            vals = both[0] * w_e
            mil *= both[1]
            vals += mil
        else:
            vals = self.quad.to_points(bx, self._edge) * w_e
        return drift, self.quad.load(vals)

    def phi_load(self, x, dW, iterated=None, fields=None) -> np.ndarray:
        """Load vector of ``(I + k A_h) Phi_h(x)``."""
        drift, noise = self.load_parts(x, dW, iterated, fields)
        return drift + noise

    def increment(self, x, dW, iterated=None) -> np.ndarray:
        """``Phi_h(x, t, k)`` for the step with Wiener increments ``dW``."""
        return self.ops.solve_step(self.phi_load(x, dW, iterated), self.k)

    def linear_step(self, x) -> np.ndarray:
        """``S_{k,h} x`` for grid functions ``x``."""
        return self.ops.step(x, self.k)

    def advance(self, x, dW, iterated=None, fields=None) -> np.ndarray:
        """``S_{k,h} x + Phi_h(x)`` with a single solve."""
        x = np.asarray(x, dtype=float)
        rhs = self.ops.mass_matvec(x) + self.phi_load(x, dW, iterated, fields)
        return self.ops.solve_step(rhs, self.k)

    def gamma(self, x, partial_dW) -> np.ndarray:
        """``Gamma(sigma) = P_h int_{t_{n-1}}^{sigma} g(x) dW`` from partial increments."""
        w = np.asarray(partial_dW, dtype=float)[..., : self.j_euler] @ self.modal[: self.j_euler]
        vals = self.quad.to_points(self.problem.diffusion.b(x), self._edge) * w
        return self.ops.solve_mass(self.quad.load(vals))


@dataclass(frozen=True)
class GammaProcess:
    """Frozen-state stochastic integral ``sigma -> int g(Z(t_{n-1})) dW`` on one step."""

    state: np.ndarray
    disc: Discretization

    def __call__(self, partial_dW) -> np.ndarray:
        return self.disc.gamma(self.state, partial_dW)


def _as_increments(path) -> np.ndarray:
    if isinstance(path, WienerPath):
        return path.increments[None]
    dW = np.asarray(path, dtype=float)
    return dW[None] if dW.ndim == 2 else dW


def run(problem: ProblemSpec, config: SchemeConfig, path, iterated=None,
        disc: Discretization | None = None) -> GridProcess:
    """Run the scheme on one ``WienerPath`` or on increments ``(paths, N, modes)``.

    ``iterated`` (optional) holds iterated integrals ``(paths, N, J, J)`` for the
    explicit double sum; otherwise the commutative identity is used.
    """
    disc = disc if disc is not None else Discretization(problem, config)
    dW = _as_increments(path)
    if dW.shape[1] != config.grid.n_steps:
        raise ValueError(f"path has {dW.shape[1]} steps, grid needs {config.grid.n_steps}")
    if dW.shape[2] < disc.j_euler:
        raise ValueError(f"path has {dW.shape[2]} modes, scheme needs {disc.j_euler}")
    if iterated is not None:
        iterated = iterated.values if isinstance(iterated, IteratedIntegrals) else iterated
        iterated = iterated[None] if iterated.ndim == 3 else iterated
    P, N = dW.shape[:2]
    states = np.empty((P, N + 1, disc.ops.n))
    states[:, 0] = disc.xi
    for n in range(1, N + 1):
        it = None if iterated is None else iterated[:, n - 1]
        states[:, n] = disc.advance(states[:, n - 1], dW[:, n - 1], it)
        if not np.all(np.isfinite(states[:, n])):
            raise NumericalBlowUp(n, config.variant.value)
    seed = path.seed if isinstance(path, WienerPath) else None
    idx = np.array([path.path_index]) if isinstance(path, WienerPath) else None
    return GridProcess(states, config.grid, config.mesh, seed, idx)


# --- empirical stability constants -------------------------------------------

def _lp(values: np.ndarray, p: float, axis=0) -> np.ndarray:
    return np.mean(np.abs(values) ** p, axis=axis) ** (1.0 / p)


def verify_increment_stability(problem: ProblemSpec, config: SchemeConfig, n_paths: int,
                               seed: int = 0, perturbation: float = 0.5) -> dict:
    """Monte Carlo estimates of the smallest ``C_Phi`` in both nonlinear stability bounds.

    The first bound is probed over all pairs ``m <= n`` with ``Phi(0, ., k)``;
    the second with ``Y`` the scheme output and ``Z = Y + perturbation * P_h e_1``
    (plus the trivial ``Y = Z`` check).  ``C_Stab`` is the bound implied by the
    Gronwall argument with ``C_S = sup_n ||S_{k,h}^n||``.
    """
    from .noise import sample_increments
    from .residual import gronwall_constant

    N = config.grid.n_steps
    if N > 64 or n_paths > 1000:
        raise ValueError("stability probe is meant for N_k <= 64 and n_paths <= 1000")
    disc = Discretization(problem, config)
    k, p = config.grid.k, problem.p
    dW = np.stack([sample_increments(problem.n_modes, config.grid, seed, i)
                   for i in range(n_paths)])
    n = disc.ops.n
    zero = np.zeros((n_paths, n))
    phi0 = np.stack([disc.increment(zero, dW[:, j]) for j in range(N)], axis=1)
    c1 = 0.0
    for m in range(1, N + 1):
        acc = np.zeros((n_paths, n))
        for nn in range(m, N + 1):
            acc = disc.linear_step(acc) + phi0[:, nn - 1] if nn > m else phi0[:, nn - 1].copy()
            lhs = float(_lp(disc.ops.h_norm(acc), p))
            c1 = max(c1, lhs / np.sqrt(k * (nn - m + 1)))
    Y = run(problem, config, dW, disc=disc).states
    shift = perturbation * disc.ops.project_spectral(np.eye(problem.n_modes)[0], problem.basis)
    Z = Y + shift
    c2 = 0.0
    diffs = np.stack([disc.increment(Y[:, j], dW[:, j]) - disc.increment(Z[:, j], dW[:, j])
                      for j in range(N)], axis=1)
    dist2 = _lp(disc.ops.h_norm(Y - Z), p) ** 2
    acc = np.zeros((n_paths, n))
    same = 0.0
    for nn in range(1, N + 1):
        acc = disc.linear_step(acc) + diffs[:, nn - 1]
        lhs2 = float(_lp(disc.ops.h_norm(acc), p)) ** 2
        t = k * np.arange(N + 1)
        rhs = k * np.sum((t[nn] - t[:nn]) ** -0.5 * dist2[:nn])
        if rhs > 0:
            c2 = max(c2, np.sqrt(lhs2 / rhs))
        same = max(same, float(np.max(np.abs(
            disc.increment(Y[:, nn - 1], dW[:, nn - 1]) - disc.increment(Y[:, nn - 1], dW[:, nn - 1])))))
    c_phi = max(c1, c2)
    c_s = 1.0  # S_{k,h} is an H-contraction and S_{k,h}^0 = I
    G = gronwall_constant(2.0 * c_phi ** 2, problem.T, 0.5, k)
    c_stab = float(np.sqrt(2.0 * (1.0 + c_s) ** 2 * G))
    return {"c_phi": c_phi, "c_phi_bound1": c1, "c_phi_bound2": c2, "c_s": c_s,
            "c_stab": c_stab, "same_state_lhs": same, "n_paths": n_paths, "k": k}
