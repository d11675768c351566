"""Q-Wiener increments in the Karhunen-Loeve basis and iterated Ito integrals.

Random numbers come from keyed Philox streams: key ``(seed, path_index)``,
with the position of every value fixed by ``(stream, step, mode)``.  Any block
of any path can be regenerated on its own, so results do not depend on how
paths are split between workers or in which order they are visited.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

# stream tags stored in the top counter word
INCREMENTS = 0
LEVY = 1
SUBGRID = 2


def _row_stride(width: int) -> int:
    return 4 * ((width + 3) // 4)


def standard_normals(seed: int, path_index: int, row_start: int, n_rows: int, width: int,
                     stream: int = INCREMENTS) -> np.ndarray:
    """Rows ``row_start .. row_start+n_rows-1`` of a ``(*, width)`` normal table.

    Values are inverse-CDF transforms of Philox4x64 output, so the entry at
    ``(row, col)`` depends only on ``(seed, path_index, stream, row, col, width)``.
    """
    stride = _row_stride(width)
    counter = [row_start * stride // 4, 0, 0, stream]
    bitgen = np.random.Philox(key=[seed, path_index], counter=counter)
    raw = bitgen.random_raw(n_rows * stride)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u).reshape(n_rows, stride)[:, :width]


@dataclass(frozen=True)
class CovarianceSpectrum:
    """Diagonal covariance ``Q phi_j = mu_j phi_j`` with ``phi_j = e_j``."""

    eigenvalues: np.ndarray
    beta: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        mu = np.asarray(self.eigenvalues, dtype=float)
        if mu.ndim != 1 or mu.size == 0:
            raise ValueError("covariance spectrum must be a nonempty 1-d array")
        if np.any(mu < 0) or np.any(np.diff(mu) > 0):
            raise ValueError("covariance eigenvalues must be nonnegative and nonincreasing")
        mu.setflags(write=False)
        object.__setattr__(self, "eigenvalues", mu)

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    @property
    def sqrt_eigenvalues(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)

    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    def tail_trace(self, J: int) -> float:
        """Trace of ``Q - Q_J`` within the modelled modes."""
        return float(self.eigenvalues[J:].sum())


def power_law_spectrum(n_modes: int, beta: float = 2.0, alpha: float | None = None
                       ) -> CovarianceSpectrum:
    """``mu_j = j^-beta``; trace class needs ``beta > 1``.

    ``alpha`` defaults to ``beta - 1``, the supremum of exponents with
    ``sum_j j^alpha mu_j < infinity``.
    """
    if beta <= 1:
        raise ValueError(f"beta must exceed 1 for trace-class noise, got {beta}")
    j = np.arange(1, n_modes + 1, dtype=float)
    return CovarianceSpectrum(j ** -beta, beta, beta - 1.0 if alpha is None else alpha)


def truncate(spec: CovarianceSpectrum, J: int) -> CovarianceSpectrum:
    """``Q_J``: eigenvalues beyond mode ``J`` set to zero."""
    if J < 0:
        raise ValueError(f"J must be nonnegative, got {J}")
    mu = spec.eigenvalues.copy()
    mu[J:] = 0.0
    return CovarianceSpectrum(mu, spec.beta, spec.alpha)


@dataclass(frozen=True)
class TimeGrid:
    k: float
    n_steps: int

    def __post_init__(self):
        if self.k <= 0 or self.n_steps < 1:
            raise ValueError(f"invalid time grid k={self.k}, n_steps={self.n_steps}")

    @classmethod
    def from_horizon(cls, T: float, k: float) -> "TimeGrid":
        """``N_k`` with ``N_k k <= T < (N_k + 1) k``."""
        n = int(np.floor(T / k + 1e-9))
        return cls(k, n)

    @property
    def times(self) -> np.ndarray:
        return self.k * np.arange(self.n_steps + 1)

    @property
    def horizon(self) -> float:
        return self.k * self.n_steps

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.k / factor, self.n_steps * factor)


@dataclass(frozen=True)
class WienerPath:
    """Increments ``dbeta[n, j] = beta_j(t_{n+1}) - beta_j(t_n)``, unscaled by ``mu_j``."""

    k: float
    increments: np.ndarray
    seed: int = 0
    path_index: int = 0

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def n_modes(self) -> int:
        return self.increments.shape[1]

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.k, self.n_steps)

    def endpoint(self) -> np.ndarray:
        """``W(t_N) - W(0)`` summed pairwise: dyadic coarsening leaves it bit-identical."""
        inc = self.increments
        while inc.shape[0] > 1 and inc.shape[0] % 2 == 0:
            inc = inc[0::2] + inc[1::2]
        return _sum_blocks(inc, inc.shape[0])[0]


def sample_increments(n_modes: int, grid: TimeGrid, seed: int, path_index: int,
                      step_start: int = 0, n_steps: int | None = None) -> np.ndarray:
    n_steps = grid.n_steps - step_start if n_steps is None else n_steps
    z = standard_normals(seed, path_index, step_start, n_steps, n_modes)
    return np.sqrt(grid.k) * z


def sample_path(spec: CovarianceSpectrum, grid: TimeGrid, seed: int, path_index: int
                ) -> WienerPath:
    dW = sample_increments(spec.n_modes, grid, seed, path_index)
    return WienerPath(grid.k, dW, seed, path_index)


def _sum_blocks(dW: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` entries along axis 0."""
    if factor == 1:
        return dW
    n = dW.shape[0]
    if factor % 2 == 0:
        # pairwise halving first, so dyadic coarsenings compose bit for bit
        halved = dW[0::2] + dW[1::2]
        return _sum_blocks(halved, factor // 2)
    blocks = dW.reshape((n // factor, factor) + dW.shape[1:])
    out = blocks[:, 0].copy()
    for i in range(1, factor):
        out += blocks[:, i]
    return out


def coarsen_increments(dW: np.ndarray, factor: int, axis: int = -2) -> np.ndarray:
    n = dW.shape[axis]
    if factor < 1 or n % factor:
        raise ValueError(f"factor {factor} does not divide {n} steps")
    if factor == 1:
        return dW
    out = _sum_blocks(np.moveaxis(dW, axis, 0), factor)
    return np.moveaxis(out, 0, axis)


class PairwiseSum:
    """Streaming block sums with the same rounding as :func:`coarsen_increments`.

    Values are pushed one step at a time; ``value`` after ``factor`` pushes
    equals the coarsened increment bit for bit.
    """

    def __init__(self, factor: int):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor
        twos = 0
        while factor % 2 == 0:
            factor //= 2
            twos += 1
        self._levels = twos
        self._odd = factor
        self._stack: list[tuple[int, np.ndarray]] = []
        self._tail = None
        self._tail_count = 0
        self.count = 0

    def push(self, x: np.ndarray) -> None:
        item, level = x, 0
        while self._stack and self._stack[-1][0] == level and level < self._levels:
            _, left = self._stack.pop()
            item = left + item
            level += 1
        if level < self._levels:
            self._stack.append((level, item))
        elif self._tail is None:
            self._tail = item.copy()
            self._tail_count = 1
        else:
            self._tail += item
            self._tail_count += 1
        self.count += 1

    @property
    def complete(self) -> bool:
        return self.count == self.factor

    @property
    def value(self) -> np.ndarray:
        if not self.complete:
            raise ValueError("block not complete")
        return self._tail

    def reset(self) -> None:
        self._stack.clear()
        self._tail = None
        self._tail_count = 0
        self.count = 0


def coarsen(path: WienerPath, factor: int) -> WienerPath:
    """Sum blocks of ``factor`` consecutive increments."""
    return WienerPath(path.k * factor, coarsen_increments(path.increments, factor, 0),
                      path.seed, path.path_index)


# --- iterated integrals ---------------------------------------------------------

@dataclass(frozen=True)
class IteratedIntegrals:
    """``values[n, i, j] = int int dbeta_i dbeta_j`` over step ``n`` (inner ``i``)."""

    k: float
    values: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.values.shape[-1]


def levy_area(dW: np.ndarray, k: float, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Truncated Fourier Levy area ``A[..., i, j]`` of a Brownian step.

    ``X[..., r, j]``, ``Y[..., r, j]`` are the normalised cosine and sine
    coefficients of the Brownian bridge for ``r = 1..K``.
    """
    K = X.shape[-2]
    r = np.arange(1, K + 1, dtype=float)
    c = np.sqrt(2.0 / k)
    Xr = X / r[:, None]
    # sum_r (1/r) [X_ir Y_jr - Y_ir X_jr + c (dW_i X_jr - dW_j X_ir)]
    xy = np.einsum("...ri,...rj->...ij", Xr, Y)
    sx = Xr.sum(axis=-2)
    dx = dW[..., :, None] * sx[..., None, :]
    A = (xy - np.swapaxes(xy, -1, -2)) + c * (dx - np.swapaxes(dx, -1, -2))
    return (k / (2.0 * np.pi)) * A


def assemble_iterated(dW: np.ndarray, k: float, A: np.ndarray) -> np.ndarray:
    """``I_(i,j) = (dW_i dW_j - k delta_ij)/2 + A_ij``.

    The diagonal is set from the Ito formula and the lower triangle from
    ``I_(j,i) = dW_i dW_j - I_(i,j)``.
    """
    J = dW.shape[-1]
    prod = dW[..., :, None] * dW[..., None, :]
    I = 0.5 * prod + A
    iu, ju = np.triu_indices(J, 1)
    I[..., ju, iu] = prod[..., iu, ju] - I[..., iu, ju]
    d = np.arange(J)
    I[..., d, d] = 0.5 * (dW[..., d] ** 2 - k)
    return I


def iterated_integrals(path: WienerPath, J: int, levy_terms: int | None = None
                       ) -> IteratedIntegrals:
    """Iterated integrals of the first ``J`` modes for every step of ``path``.

    ``levy_terms`` defaults to ``ceil(1/k)``.
    """
    if J > path.n_modes:
        raise ValueError(f"J={J} exceeds the {path.n_modes} sampled modes")
    K = int(np.ceil(1.0 / path.k)) if levy_terms is None else int(levy_terms)
    if K < 1:
        raise ValueError("levy_terms must be >= 1")
    dW = path.increments[:, :J]
    z = standard_normals(path.seed, path.path_index, 0, path.n_steps, 2 * K * J, stream=LEVY)
    z = z.reshape(path.n_steps, 2, K, J)
    A = levy_area(dW, path.k, z[:, 0], z[:, 1])
    return IteratedIntegrals(path.k, assemble_iterated(dW, path.k, A))


def subgrid_iterated_integrals(fine_dW: np.ndarray) -> np.ndarray:
    """Ito-Riemann double sums over one step split into ``fine_dW.shape[-2]`` parts."""
    before = np.cumsum(fine_dW, axis=-2) - fine_dW
    return np.einsum("...mi,...mj->...ij", before, fine_dW)


def bridge_fourier_coefficients(fine_dW: np.ndarray, k: float, K: int):
    """Normalised Fourier coefficients ``(X, Y)`` of the polygonal Brownian bridge.

    ``fine_dW[..., m, j]`` are sub-step increments over ``[0, k]``; the result
    has shape ``(..., K, J)`` and is standard normal in the continuum limit.
    """
    n_sub = fine_dW.shape[-2]
    s = np.linspace(0.0, k, n_sub + 1)
    W = np.concatenate([np.zeros_like(fine_dW[..., :1, :]), np.cumsum(fine_dW, axis=-2)], axis=-2)
    B = W - (s / k)[:, None] * W[..., -1:, :]
    omega = 2.0 * np.pi * np.arange(1, K + 1) / k
    slope = np.diff(B, axis=-2) / (k / n_sub)
    e = np.exp(1j * np.outer(s, omega))  # (n_sub+1, K)
    F = e / (1j * omega)
    G0 = e / omega ** 2
    seg_len = (k / n_sub)
    # int over [s_m, s_m+1] of (B_m + slope_m (s - s_m)) e^{i w s} ds
    Fd = F[1:] - F[:-1]
    Gd = seg_len * e[1:] / (1j * omega) + G0[1:] - G0[:-1]
    integ = (np.einsum("...mj,mr->...rj", B[..., :-1, :], Fd)
             + np.einsum("...mj,mr->...rj", slope, Gd))
    a = (2.0 / k) * integ.real
    b = (2.0 / k) * integ.imag
    sigma = np.sqrt(k / 2.0) / (np.pi * np.arange(1, K + 1))
    return a / sigma[:, None], b / sigma[:, None]


# --- binary dump ----------------------------------------------------------------

_HEADER = struct.Struct("<dqqq")


def write_path(path: WienerPath, file: str | Path) -> None:
    """Little-endian dump: header ``(k: f8, N_k: i8, J: i8, seed: i8)`` then
    ``N_k * J`` float64 increments, step-major."""
    with open(file, "wb") as fh:
        fh.write(_HEADER.pack(path.k, path.n_steps, path.n_modes, path.seed))
        fh.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())


def read_path(file: str | Path, path_index: int = 0) -> WienerPath:
    data = Path(file).read_bytes()
    k, n, J, seed = _HEADER.unpack_from(data)
    inc = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=n * J).reshape(n, J)
    return WienerPath(k, inc.astype(float), seed, path_index)
