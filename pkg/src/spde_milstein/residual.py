"""Residuals, Spijker and sup norms, and the consistency bookkeeping.

All ``L_p(Omega; H)`` norms are Monte Carlo estimates over the leading path
axis.  Each estimate comes with a delta-method standard error computed from
the per-path samples of ``||.||^p``; the maximum over time nodes sits outside
the expectation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import FemOperators
from .noise import TimeGrid
from .scheme import Discretization, GridProcess, _as_increments


class InconsistentRatio(ArithmeticError):
    pass


@dataclass
class ResidualField:
    """``values[path, n, node] = R_k[Z](t_n)``."""

    values: np.ndarray
    grid: TimeGrid

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormReport:
    spijker: float
    sup: float
    p: float
    n_paths: int
    spijker_stderr: float
    sup_stderr: float


# --- Monte Carlo L_p estimates ----------------------------------------------

def lp_estimate(norms, p: float):
    """``(mean |y|^p)^{1/p}`` over axis 0 with its delta-method standard error."""
    y = np.abs(np.asarray(norms, dtype=float)) ** p
    m = y.mean(axis=0)
    n = y.shape[0]
    se_m = y.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(m)
    est = m ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(m > 0, est / (p * m) * se_m, 0.0)
    return est, se


def lp_max(norms, p: float):
    """``max_n ||.||_{L_p}`` for per-path norms ``(paths, nodes)``.

    Returns ``(value, stderr, argmax)``.
    """
    est, se = lp_estimate(norms, p)
    i = int(np.argmax(est))
    return float(est[i]), float(se[i]), i


def sup_norm(Z, ops: FemOperators, p: float = 2.0):
    """``||Z||_{0,p} = max_n ||Z(t_n)||_{L_p(Omega;H)}`` and its standard error."""
    states = Z.states if isinstance(Z, GridProcess) else np.asarray(Z, dtype=float)
    value, se, _ = lp_max(ops.h_norm(states), p)
    return value, se


# --- residual operator ------------------------------------------------------------

def residual(Z, disc: Discretization, path, iterated=None) -> ResidualField:
    """``R_k[Z](t_0) = Z(t_0) - xi_h`` and
    ``R_k[Z](t_n) = Z(t_n) - S_{k,h} Z(t_{n-1}) - Phi_h(Z(t_{n-1}))``."""
    states = Z.states if isinstance(Z, GridProcess) else np.asarray(Z, dtype=float)
    dW = _as_increments(path)
    grid = disc.config.grid
    if states.shape[1] != grid.n_steps + 1 or dW.shape[1] != grid.n_steps:
        raise ValueError("grid function, path and scheme live on different time grids")
    if isinstance(Z, GridProcess) and (Z.grid != grid or Z.mesh != disc.config.mesh):
        raise ValueError("grid function does not live on the scheme's grid")
    if iterated is not None and iterated.ndim == 3:
        iterated = iterated[None]
    out = np.empty_like(states)
    out[:, 0] = states[:, 0] - disc.xi
    for n in range(1, grid.n_steps + 1):
        it = None if iterated is None else iterated[:, n - 1]
        out[:, n] = states[:, n] - disc.advance(states[:, n - 1], dW[:, n - 1], it)
    return ResidualField(out, grid)


def reconstruct(V, disc: Discretization, path, iterated=None) -> GridProcess:
    """Inverse of :func:`residual` via the discrete variation-of-constants recursion."""
    values = V.values if isinstance(V, ResidualField) else np.asarray(V, dtype=float)
    dW = _as_increments(path)
    if iterated is not None and iterated.ndim == 3:
        iterated = iterated[None]
    Z = np.empty_like(values)
    Z[:, 0] = values[:, 0] + disc.xi
    for n in range(1, values.shape[1]):
        it = None if iterated is None else iterated[:, n - 1]
        Z[:, n] = disc.advance(Z[:, n - 1], dW[:, n - 1], it) + values[:, n]
    return GridProcess(Z, disc.config.grid, disc.config.mesh)


# --- Spijker norm ---------------------------------------------------------------------

def spijker_partial_sums(values, k: float, ops: FemOperators) -> np.ndarray:
    """``s_n = sum_{j=1}^n S_k^{n-j} V(t_j)`` via ``s_n = S_k s_{n-1} + V(t_n)``; ``s_0 = 0``."""
    values = np.asarray(values, dtype=float)
    s = np.zeros_like(values)
    for n in range(1, values.shape[1]):
        s[:, n] = ops.step(s[:, n - 1], k) + values[:, n]
    return s


def spijker_norm(V, k: float, ops: FemOperators, p: float = 2.0) -> NormReport:
    """``||V||_{-1,p} = ||V(t_0)||_{L_p} + max_n ||sum_j S_k^{n-j} V(t_j)||_{L_p}``."""
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    values = V.values if isinstance(V, ResidualField) else np.asarray(V, dtype=float)
    first, first_se = lp_estimate(ops.h_norm(values[:, 0]), p)
    if values.shape[1] > 1:
        s = spijker_partial_sums(values, k, ops)
        tail, tail_se, _ = lp_max(ops.h_norm(s[:, 1:]), p)
    else:
        tail, tail_se = 0.0, 0.0
    sup, sup_se, _ = lp_max(ops.h_norm(values), p)
    return NormReport(float(first + tail), sup, p, values.shape[0],
                      float(np.hypot(first_se, tail_se)), sup_se)


def spijker_norm_dense(V, k: float, ops: FemOperators, p: float = 2.0) -> float:
    """Brute-force Spijker norm: every partial sum formed with dense matrix powers."""
    values = V.values if isinstance(V, ResidualField) else np.asarray(V, dtype=float)
    M, K = ops.mass, ops.stiffness
    S = np.linalg.solve(M + k * K, M)
    N = values.shape[1] - 1
    powers = [np.eye(ops.n)]
    for _ in range(N):
        powers.append(S @ powers[-1])

    def lp(vs):
        norms = np.sqrt(np.einsum("pi,ij,pj->p", vs, M, vs))
        return np.mean(norms ** p) ** (1.0 / p)

    best = 0.0
    for n in range(1, N + 1):
        total = sum(values[:, j] @ powers[n - j].T for j in range(1, n + 1))
        best = max(best, lp(total))
    return float(lp(values[:, 0]) + best)


def two_sided_ratio(err: float, res: float) -> float:
    """``err / res`` with ``0/0 := 1``."""
    if res == 0.0:
        if err == 0.0:
            return 1.0
        raise InconsistentRatio(f"zero residual norm with nonzero error {err}")
    if res < 0 or err < 0:
        raise ValueError("norms must be nonnegative")
    return err / res


# --- consistency decomposition ------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyTerms:
    initial: float
    semigroup: float
    drift: float
    diffusion: float
    increment: float
    spijker: float
    spijker_stderr: float

    @property
    def total(self) -> float:
        return self.initial + self.semigroup + self.drift + self.diffusion + self.increment

    def as_tuple(self):
        return (self.initial, self.semigroup, self.drift, self.diffusion, self.increment)


def consistency_terms(reference: GridProcess, ref_disc: Discretization, disc: Discretization,
                      fine_dW) -> ConsistencyTerms:
    """The five summands bounding the local truncation error, for a fine reference.

    The reference comes from ``ref_disc`` on a time grid refining the coarse
    grid by ``R`` on the same mesh.  Its own propagator ``S_f`` stands in for
    the semigroup (``S(t_n - sigma) ~ S_f^{(t_n - s_m)/k_f}``), and its drift
    and noise increments stand in for the two integrals.  With these choices
    the residual of the restricted reference splits exactly into the five
    parts, so the Spijker norm never exceeds their sum.  The first term is the
    exact ``||X_0 - P_h X_0||``.
    """
    ops = disc.ops
    if ref_disc.config.mesh != disc.config.mesh:
        raise ValueError("reference and scheme must share the mesh")
    kf, k = ref_disc.k, disc.k
    R = int(round(k / kf))
    Nc = disc.config.grid.n_steps
    if abs(R * kf - k) > 1e-12 * k or reference.grid.n_steps != R * Nc:
        raise ValueError("reference grid does not refine the scheme grid")
    fine_dW = _as_increments(fine_dW)
    X = reference.states
    P = X.shape[0]
    problem = disc.problem
    basis = problem.basis

    initial = float(ops.distance_to_spectral(ref_disc.xi, problem.x0, basis))
    Sf = lambda c: ops.step(c, kf)      # noqa: E731
    Sk = lambda c: ops.step(c, k)       # noqa: E731

    xi = disc.xi
    u_f, u_k = xi.copy(), xi.copy()
    semi = 0.0
    shape = (P, ops.n)
    D_a, D_b = np.zeros(shape), np.zeros(shape)
    E_a, E_b = np.zeros(shape), np.zeros(shape)
    F = np.zeros(shape)
    n3, n4, n5 = [], [], []
    for n in range(1, Nc + 1):
        A_sum, B_sum = np.zeros(shape), np.zeros(shape)
        blk_a, blk_b = np.zeros(shape), np.zeros(shape)
        for m in range((n - 1) * R, n * R):
            drift, noise = ref_disc.load_parts(X[:, m], fine_dW[:, m])
            a = -ops.solve_mass(drift)
            b = ops.solve_mass(noise)
            A_sum += a
            B_sum += b
            blk_a = Sf(blk_a + a)
            blk_b = Sf(blk_b + b)
            u_f = Sf(u_f)
        u_k = Sk(u_k)
        semi = max(semi, float(ops.h_norm(u_f - u_k)))
        for _ in range(R):
            D_a, D_b = Sf(D_a), Sf(D_b)
        D_a += blk_a
        D_b += blk_b
        E_a = Sk(E_a + A_sum)
        E_b = Sk(E_b + B_sum)
        dW_c = fine_dW[:, (n - 1) * R: n * R].sum(axis=1)
        phi = disc.increment(X[:, (n - 1) * R], dW_c)
        F = Sk(F) + Sk(B_sum - A_sum) - phi
        n3.append(ops.h_norm(D_a - E_a))
        n4.append(ops.h_norm(D_b - E_b))
        n5.append(ops.h_norm(F))
    p = problem.p
    t3 = lp_max(np.stack(n3, axis=1), p)[0]
    t4 = lp_max(np.stack(n4, axis=1), p)[0]
    t5 = lp_max(np.stack(n5, axis=1), p)[0]
    restricted = GridProcess(X[:, ::R], disc.config.grid, disc.config.mesh)
    coarse_dW = fine_dW.reshape(P, Nc, R, -1).sum(axis=2)
    rep = spijker_norm(residual(restricted, disc, coarse_dW), k, ops, p)
    return ConsistencyTerms(initial, semi, t3, t4, t5, rep.spijker, rep.spijker_stderr)


# --- Gronwall, Burkholder, telescoping ------------------------------------------------

def _kernel(n: int, k: float, eta: float) -> np.ndarray:
    """``k (t_n - t_{j-1})^{-1+eta}`` for ``j = 1..n``."""
    j = np.arange(1, n + 1)
    return k * (k * (n - j + 1)) ** (eta - 1.0)


def gronwall_constant(C2: float, T: float, eta: float, k: float) -> float:
    """``max_n y_n`` for the extremal sequence ``y_n = 1 + C2 sum_j kernel y_{j-1}``."""
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    N = int(np.floor(T / k + 1e-9))
    y = np.ones(N + 1)
    for n in range(1, N + 1):
        y[n] = 1.0 + C2 * float(_kernel(n, k, eta) @ y[:n])
    return float(y.max())


@dataclass(frozen=True)
class GronwallResult:
    holds: bool
    constant: float
    violation: int | None
    bound: float


def gronwall_check(x, C1: float, C2: float, eta: float, k: float, rtol: float = 1e-12
                   ) -> GronwallResult:
    """Check ``x_n <= C1 + C2 k sum_j (t_n - t_{j-1})^{-1+eta} x_{j-1}`` for every ``n``.

    ``constant`` is ``max_n x_n / C1``; ``bound`` is the extremal-sequence
    constant ``C(C2, T, eta)`` for ``T = N k``.
    """
    if C1 <= 0:
        raise ValueError(f"C1 must be positive, got {C1}")
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("sequence must be nonnegative")
    violation = None
    for n in range(x.size):
        rhs = C1 + (C2 * float(_kernel(n, k, eta) @ x[:n]) if n else 0.0)
        if x[n] > rhs * (1 + rtol):
            violation = n
            break
    T = k * (x.size - 1)
    bound = gronwall_constant(C2, T, eta, k) if x.size > 1 else 1.0
    return GronwallResult(violation is None, float(x.max() / C1), violation, bound)


def burkholder_constant(p: float) -> float:
    """``C(p) = (p (p-1) / 2)^{1/2} (p / (p-1))^{p/2 - 1}``."""
    if p < 2:
        raise ValueError(f"p must be >= 2, got {p}")
    return float(np.sqrt(p * (p - 1) / 2.0) * (p / (p - 1)) ** (p / 2.0 - 1.0))


def telescoping_check(ops: FemOperators, k: float, n: int, n_modes: int = 32,
                      diagonal: bool = False) -> float:
    """Max deviation in ``sum_j S_k^{n-j} (S(k) - S_k) S(t_{j-1}) = S(t_n) - S_k^n``.

    Operators act on spectral inputs ``e_1..e_{n_modes}``; outputs are kept as
    a pair (spectral part, ``V_h`` part) of dense matrices.  With
    ``diagonal=True`` ``S_k`` is replaced by the diagonal surrogate
    ``(I + k A)^{-1}`` so that everything commutes.
    """
    lam = (np.pi * np.arange(1, n_modes + 1)) ** 2
    S = lambda t: np.diag(np.exp(-lam * t))  # noqa: E731
    if diagonal:
        Sk = np.diag(1.0 / (1.0 + k * lam))
        lhs = np.zeros((n_modes, n_modes))
        Skj = [np.linalg.matrix_power(Sk, m) for m in range(n + 1)]
        for j in range(1, n + 1):
            lhs += Skj[n - j] @ (S(k) - Sk) @ S(k * (j - 1))
        return float(np.max(np.abs(lhs - (S(k * n) - Skj[n]))))
    L = ops.lift_matrix(n_modes)
    A = ops.mass + k * ops.stiffness
    from_spec = np.linalg.solve(A, L.T)          # S_k on spectral input
    from_vh = np.linalg.solve(A, ops.mass)       # S_k on V_h input

    def Sk_pow(m, spec_block):
        """``S_k^m`` applied to spectral columns; returns (spectral, V_h) parts."""
        if m == 0:
            return spec_block, np.zeros((ops.n, spec_block.shape[1]))
        out = from_spec @ spec_block
        for _ in range(m - 1):
            out = from_vh @ out
        return np.zeros_like(spec_block), out

    lhs_s = np.zeros((n_modes, n_modes))
    lhs_v = np.zeros((ops.n, n_modes))
    for j in range(1, n + 1):
        y = S(k * (j - 1))
        a_s, a_v = Sk_pow(n - j, S(k) @ y)
        b_s, b_v = Sk_pow(n - j + 1, y)
        lhs_s += a_s - b_s
        lhs_v += a_v - b_v
    r_s, r_v = S(k * n), -Sk_pow(n, np.eye(n_modes))[1]
    return float(max(np.max(np.abs(lhs_s - r_s)), np.max(np.abs(lhs_v - r_v))))
