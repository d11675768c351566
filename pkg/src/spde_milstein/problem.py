"""Nemytskii coefficients, the problem bundle, and config loading."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .fem import FemOperators, gauss_quadrature
from .noise import CovarianceSpectrum, power_law_spectrum
from .spectral import EigenBasis, laplacian_eigenpairs

ScalarFn = Callable[[np.ndarray], np.ndarray]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScalarFunction:
    """A named scalar map with its derivative and a declared Lipschitz bound."""

    name: str
    fun: ScalarFn
    deriv: ScalarFn
    lipschitz: float

    def __call__(self, u):
        return self.fun(np.asarray(u, dtype=float))


def _const(c: float) -> ScalarFunction:
    return ScalarFunction(f"const{c:g}", lambda u: np.full_like(u, c, dtype=float),
                          lambda u: np.zeros_like(u, dtype=float), 0.0)


REGISTRY: dict[str, ScalarFunction] = {
    "zero": ScalarFunction("zero", lambda u: np.zeros_like(u), lambda u: np.zeros_like(u), 0.0),
    "one": ScalarFunction("one", lambda u: np.ones_like(u), lambda u: np.zeros_like(u), 0.0),
    "identity": ScalarFunction("identity", lambda u: u.copy(), lambda u: np.ones_like(u), 1.0),
    "rational": ScalarFunction(
        "rational", lambda u: u / (1.0 + u * u),
        lambda u: (1.0 - u * u) / (1.0 + u * u) ** 2, 1.0),
    "sine": ScalarFunction("sine", np.sin, np.cos, 1.0),
    "tanh": ScalarFunction("tanh", np.tanh, lambda u: 1.0 / np.cosh(u) ** 2, 1.0),
    # |d/du (1+u^2)^{-1/2}| <= 2/(3 sqrt 3) < 0.385, plus 0.1 from the sine
    "bump_sine": ScalarFunction(
        "bump_sine", lambda u: 1.0 / np.sqrt(1.0 + u * u) + 0.1 * np.sin(u),
        lambda u: -u / (1.0 + u * u) ** 1.5 + 0.1 * np.cos(u), 0.5),
}


def lookup(name: str) -> ScalarFunction:
    if name.startswith("const:"):
        return _const(float(name.split(":", 1)[1]))
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown scalar function {name!r}; known: {sorted(REGISTRY)}") from None


@dataclass(frozen=True)
class NemytskiiDrift:
    """``f(x)(xi) = b(x(xi))``."""

    b: ScalarFunction

    @property
    def lipschitz(self) -> float:
        return self.b.lipschitz


@dataclass(frozen=True)
class NemytskiiDiffusion:
    """``(g(x) u)(xi) = b(x(xi)) u(xi)`` and ``(g'(x)[y] u)(xi) = b'(x(xi)) y(xi) u(xi)``."""

    b: ScalarFunction

    @property
    def lipschitz(self) -> float:
        return self.b.lipschitz

    @property
    def is_additive(self) -> bool:
        return self.b.name in ("zero", "one") or self.b.name.startswith("const")

    def composite(self, u):
        """Nodal ``b'(u) b(u)``, the symbol of ``g'(x) g(x)``."""
        u = np.asarray(u, dtype=float)
        return self.b.deriv(u) * self.b.fun(u)


@dataclass(frozen=True)
class ProblemSpec:
    """``dX + [A X + f(X)] dt = g(X) dW`` on ``(0, T)`` with ``X(0) = X0``."""

    basis: EigenBasis
    drift: NemytskiiDrift
    diffusion: NemytskiiDiffusion
    covariance: CovarianceSpectrum
    x0: np.ndarray
    T: float = 1.0
    r: float = 0.5
    p: float = 2.0
    name: str = "custom"
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.basis.n_modes,):
            raise ConfigError(f"x0 needs {self.basis.n_modes} coefficients, got {x0.shape}")
        if not np.all(np.isfinite(x0 * self.basis.eigenvalues ** ((1 + self.r) / 2))):
            raise ConfigError("initial value must lie in H^{1+r}")
        if self.covariance.n_modes != self.basis.n_modes:
            raise ConfigError("covariance and eigenbasis must use the same number of modes")
        if not 0 <= self.r < 1:
            raise ConfigError(f"r must lie in [0, 1), got {self.r}")
        if self.p < 2:
            raise ConfigError(f"p must be >= 2, got {self.p}")
        if self.T <= 0:
            raise ConfigError(f"T must be positive, got {self.T}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes

    def replace(self, **changes) -> "ProblemSpec":
        from dataclasses import replace
        return replace(self, **changes)


DEFAULTS = {
    "name": "default",
    "drift": "rational",
    "diffusion": "bump_sine",
    "beta": 2.0,
    "alpha": None,
    "r": 0.5,
    "p": 2.0,
    "T": 1.0,
    "n_modes": 256,
    "x0": {1: 1.0, 3: 0.5},
}


def build_problem(**overrides) -> ProblemSpec:
    """Problem from the declarative keys of ``DEFAULTS``."""
    unknown = set(overrides) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown problem keys: {sorted(unknown)}")
    cfg = {**DEFAULTS, **overrides}
    try:
        n_modes = int(cfg["n_modes"])
        basis = laplacian_eigenpairs(n_modes)
        x0 = np.zeros(n_modes)
        x0_spec = cfg["x0"]
        if isinstance(x0_spec, dict):
            for j, v in x0_spec.items():
                j = int(j)
                if not 1 <= j <= n_modes:
                    raise ConfigError(f"x0 mode {j} outside 1..{n_modes}")
                x0[j - 1] = float(v)
        else:
            vals = np.asarray(x0_spec, dtype=float)
            x0[: vals.size] = vals
        cov = power_law_spectrum(n_modes, float(cfg["beta"]),
                                 None if cfg["alpha"] is None else float(cfg["alpha"]))
        return ProblemSpec(
            basis=basis,
            drift=NemytskiiDrift(lookup(cfg["drift"])),
            diffusion=NemytskiiDiffusion(lookup(cfg["diffusion"])),
            covariance=cov,
            x0=x0,
            T=float(cfg["T"]),
            r=float(cfg["r"]),
            p=float(cfg["p"]),
            name=str(cfg["name"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def default_problem(**overrides) -> ProblemSpec:
    return build_problem(**overrides)


def load_config(path: str | Path) -> dict:
    """Read a YAML config with optional ``problem`` and ``experiment`` sections."""
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(data) - {"problem", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


# --- Nemytskii actions on grid functions ----------------------------------------

def apply_drift(x, drift: NemytskiiDrift, ops: FemOperators | None = None) -> np.ndarray:
    """``P_h f(x)`` with ``f(x)`` replaced by its nodal interpolant (which lies in ``V_h``)."""
    return drift.b(x)


def _b0(problem: ProblemSpec) -> float:
    return float(problem.diffusion.b(np.zeros(1))[0])


def apply_diffusion_mode(x, j: int, problem: ProblemSpec, ops: FemOperators,
                         projection: str = "l2") -> np.ndarray:
    """``g(x) phi_j`` as a grid function, without the ``sqrt(mu_j)`` factor.

    ``projection="nodal"`` returns nodal products ``b(x_i) phi_j(xi_i)``;
    ``"l2"`` returns ``P_h`` of ``I_h[b(x)] phi_j`` by quadrature fine enough
    to resolve mode ``j``.
    """
    if not 1 <= j <= problem.n_modes:
        raise ValueError(f"mode {j} outside 1..{problem.n_modes}")
    x = np.asarray(x, dtype=float)
    bx = problem.diffusion.b(x)
    mesh = ops.mesh
    if projection == "nodal":
        return bx * problem.basis.eval(j, mesh.nodes)
    if projection != "l2":
        raise ValueError(f"unknown projection {projection!r}")
    quad = gauss_quadrature(mesh, max(1, -(-2 * j // mesh.n_cells)), 4)
    vals = quad.to_points(bx, _b0(problem)) * problem.basis.eval(j, quad.points)
    return ops.solve_mass(quad.load(vals))


def diffusion_spectral_matrix(x, problem: ProblemSpec, ops: FemOperators,
                              n_modes: int | None = None) -> np.ndarray:
    """``G[..., j, m] = (I_h[b(x)] e_j, e_m)`` by quadrature."""
    n = problem.n_modes if n_modes is None else n_modes
    quad = gauss_quadrature(ops.mesh, max(1, -(-2 * n // ops.mesh.n_cells)), 4)
    E = problem.basis.matrix(quad.points, n)
    bq = quad.to_points(problem.diffusion.b(np.asarray(x, dtype=float)), _b0(problem))
    return np.einsum("jq,...q,mq->...jm", E * quad.weights, bq, E)


def hs_norm(x, problem: ProblemSpec, ops: FemOperators, s: float = 0.0):
    """``(sum_j mu_j ||g(x) phi_j||_s^2)^{1/2}`` with the ``s``-norm taken spectrally."""
    G = diffusion_spectral_matrix(x, problem, ops)
    lam_s = problem.basis.eigenvalues ** s
    per_mode = np.einsum("...jm,m->...j", G * G, lam_s)
    return np.sqrt(np.sum(problem.covariance.eigenvalues * per_mode, axis=-1))


def hs_norm_by_modes(x, problem: ProblemSpec, ops: FemOperators, s: float = 0.0):
    """Same quantity assembled one mode at a time (cross-check of ``hs_norm``)."""
    n = problem.n_modes
    quad = gauss_quadrature(ops.mesh, max(1, -(-2 * n // ops.mesh.n_cells)), 4)
    bq = quad.to_points(problem.diffusion.b(np.asarray(x, dtype=float)), _b0(problem))
    E = problem.basis.matrix(quad.points)
    lam_s = problem.basis.eigenvalues ** s
    total = 0.0
    for j in range(n):
        coeffs = (E * quad.weights) @ (bq * E[j])
        total = total + problem.covariance.eigenvalues[j] * np.sum(lam_s * coeffs ** 2)
    return np.sqrt(total)
