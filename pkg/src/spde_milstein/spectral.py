"""Spectral data of the Dirichlet Laplacian on (0, 1).

Elements of the fractional spaces are stored as coefficient arrays
``x[..., j-1] = (x, e_j)`` in the eigenbasis ``e_j(xi) = sqrt(2) sin(j pi xi)``.
All sums over modes are truncated at ``EigenBasis.n_modes``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class EigenBasis:
    """Eigenpairs ``(lambda_j, e_j)``, ``j = 1..n_modes``, of ``-d^2/dxi^2``."""

    n_modes: int
    eigenvalues: np.ndarray

    def __post_init__(self):
        self.eigenvalues.setflags(write=False)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1)

    def eval(self, j, xi):
        """Evaluate ``e_j(xi)``; ``j`` is 1-based and broadcasts against ``xi``."""
        return SQRT2 * np.sin(np.pi * np.asarray(j) * np.asarray(xi))

    def matrix(self, xi, n: int | None = None) -> np.ndarray:
        """``E[j-1, q] = e_j(xi_q)`` for the first ``n`` modes."""
        n = self.n_modes if n is None else n
        xi = np.asarray(xi, dtype=float)
        return SQRT2 * np.sin(np.pi * np.outer(np.arange(1, n + 1), xi))

    def synthesize(self, coeffs, xi) -> np.ndarray:
        """Point values of ``sum_j x_j e_j`` at ``xi``."""
        coeffs = np.asarray(coeffs, dtype=float)
        return coeffs @ self.matrix(xi, coeffs.shape[-1])


def laplacian_eigenpairs(n_modes: int) -> EigenBasis:
    if n_modes < 1:
        raise ValueError(f"n_modes must be >= 1, got {n_modes}")
    j = np.arange(1, n_modes + 1, dtype=float)
    return EigenBasis(n_modes, (np.pi * j) ** 2)


def _check(x, basis: EigenBasis) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != basis.n_modes:
        raise ValueError(
            f"coefficient length {x.shape[-1]} does not match basis size {basis.n_modes}")
    return x


def apply_fractional_power(x, s: float, basis: EigenBasis) -> np.ndarray:
    """``A^{s/2} x``, coefficient-wise ``lambda_j^{s/2} x_j``."""
    x = _check(x, basis)
    return x * basis.eigenvalues ** (0.5 * s)


def fractional_norm(x, s: float, basis: EigenBasis):
    """``||x||_s = (sum_j lambda_j^s x_j^2)^{1/2}``; reduces over the last axis."""
    x = _check(x, basis)
    if not np.all(np.isfinite(x)):
        raise ValueError("coefficients must be finite")
    return np.sqrt(np.sum(basis.eigenvalues ** s * x * x, axis=-1))


def apply_semigroup(x, t: float, basis: EigenBasis) -> np.ndarray:
    """``S(t) x = exp(-t A) x``."""
    if t < 0:
        raise ValueError(f"semigroup time must be nonnegative, got {t}")
    x = _check(x, basis)
    return x * np.exp(-basis.eigenvalues * t)


def smoothing_bound(t: float, rho: float, basis: EigenBasis) -> float:
    """``sup_j lambda_j^{rho} exp(-lambda_j t)`` over the truncated spectrum."""
    lam = basis.eigenvalues
    return float(np.max(lam ** rho * np.exp(-lam * t)))
