"""Fast property checks behind ``selftest``.

Every check raises ``AssertionError`` on failure and returns a short detail
string otherwise.  The same functions are exercised by the test suite.
"""
from __future__ import annotations

import time

import numpy as np

from .fem import Mesh1D, assemble
from .noise import (TimeGrid, coarsen, iterated_integrals, sample_path, power_law_spectrum)
from .problem import REGISTRY, default_problem
from .residual import (burkholder_constant, gronwall_check, gronwall_constant, reconstruct,
                       residual, spijker_norm, spijker_norm_dense, telescoping_check)
from .scheme import Discretization, SchemeConfig, run
from .spectral import laplacian_eigenpairs


def check_projectors():
    rng = np.random.default_rng(1)
    ops = assemble(Mesh1D(32))
    basis = laplacian_eigenpairs(64)
    for _ in range(20):
        c = rng.standard_normal(ops.n)
        back = ops.solve_mass(ops.mass_matvec(c))
        assert np.max(np.abs(back - c)) < 1e-12, "P_h not idempotent on V_h"
        x = rng.standard_normal(64) / np.arange(1, 65) ** 2
        assert ops.h_norm(ops.project_spectral(x, basis)) <= np.linalg.norm(x) + 1e-12
    return "P_h idempotent and H-contractive"


def check_negative_norm():
    rng = np.random.default_rng(2)
    ops = assemble(Mesh1D(32))
    basis = laplacian_eigenpairs(256)
    lam, V = ops.pencil
    worst = -np.inf
    for _ in range(50):
        x = rng.standard_normal(256) / np.arange(1, 257)
        c = ops.project_spectral(x, basis)
        lhs = np.linalg.norm((c @ ops.mass @ V) * lam ** -0.5)
        rhs = np.sqrt(np.sum(x * x / basis.eigenvalues))
        worst = max(worst, lhs - rhs)
    assert worst <= 1e-8, f"discrete negative norm estimate violated by {worst}"
    return f"max ||A_h^-1/2 P_h x|| - ||x||_-1 = {worst:.2e}"


def check_discrete_smoothing():
    ops = assemble(Mesh1D(32))
    lam, V = ops.pencil
    k = 1.0 / 64
    worst = 0.0
    for rho in (0.5, 1.0):
        for j in range(1, 65):
            # operator norm of A_h^rho (I + k A_h)^-j in the M-inner product
            norm = np.max(lam ** rho / (1 + k * lam) ** j)
            worst = max(worst, norm * (j * k) ** rho)
    assert worst <= 2.0, f"smoothing constant {worst} exceeds 2"
    return f"measured smoothing constant {worst:.3f}"


def check_gronwall():
    ok = gronwall_check(np.full(10, 0.5), 1.0, 0.0, 0.5, 0.1)
    assert ok.holds and ok.constant <= 1.0
    x = np.array([1.0, 1.0, 1.0, 50.0, 1.0])
    bad = gronwall_check(x, 1.0, 1.0, 0.5, 0.1)
    assert not bad.holds and bad.violation == 3
    k, C2, eta = 0.05, 2.0, 0.5
    C = gronwall_constant(C2, 1.0, eta, k)
    y = np.ones(21)
    for n in range(1, 21):
        j = np.arange(1, n + 1)
        y[n] = 1 + C2 * np.sum(k * (k * (n - j + 1)) ** (eta - 1) * y[:n])
    res = gronwall_check(3.0 * y, 3.0, C2, eta, k)
    assert res.holds and abs(res.constant - C) < 1e-12 * C
    return f"C(2, 1, 1/2) at k=0.05: {C:.4f}"


def _small_setup(n_steps=4, n_paths=2, n_cells=16, n_modes=32, variant="milstein"):
    problem = default_problem(n_modes=n_modes)
    grid = TimeGrid(1.0 / n_steps, n_steps)
    disc = Discretization(problem, SchemeConfig(variant, grid, Mesh1D(n_cells)))
    cov = problem.covariance
    paths = [sample_path(cov, grid, 7, i) for i in range(n_paths)]
    dW = np.stack([p.increments for p in paths])
    return problem, disc, dW, paths


def check_spijker_oracle():
    rng = np.random.default_rng(3)
    _, disc, _, _ = _small_setup()
    V = rng.standard_normal((2, 5, disc.ops.n))
    fast = spijker_norm(V, disc.k, disc.ops, 2.0).spijker
    dense = spijker_norm_dense(V, disc.k, disc.ops, 2.0)
    assert abs(fast - dense) <= 1e-12 * max(1.0, dense), (fast, dense)
    return f"recursive vs dense: {abs(fast - dense):.1e}"


def check_nemytskii_derivatives():
    rng = np.random.default_rng(4)
    u = rng.uniform(-5, 5, 1000)
    worst = 0.0
    for name, fn in REGISTRY.items():
        eps = 1e-6
        fd = (fn(u + eps) - fn(u - eps)) / (2 * eps)
        err = np.max(np.abs(fd - fn.deriv(u)) / np.maximum(1.0, np.abs(fn.deriv(u))))
        assert err < 1e-6, f"{name}: derivative mismatch {err}"
        a, b = rng.uniform(-10, 10, (2, 10000))
        if fn.lipschitz > 0 or name in ("zero", "one"):
            lhs = np.abs(fn(a) - fn(b))
            assert np.all(lhs <= fn.lipschitz * np.abs(a - b) + 1e-12), f"{name}: Lipschitz"
        worst = max(worst, err)
    return f"max relative derivative error {worst:.1e}"


def check_rng_reproducibility():
    from .harness import StudyBuilder, run_sweep
    b = StudyBuilder((("n_modes", 16),), "temporal", (0.25, 0.125), ("milstein",), None,
                     0.0, 8, 2, 1)
    one = run_sweep(b, 6, 11, batch_size=6, workers=1)
    split = run_sweep(b, 6, 11, batch_size=2, workers=2)
    for key in one.errors:
        assert np.array_equal(one.errors[key], split.errors[key]), key
    p = power_law_spectrum(8)
    g = TimeGrid(0.1, 10)
    assert np.array_equal(sample_path(p, g, 5, 3).increments, sample_path(p, g, 5, 3).increments)
    return "identical per-path errors for 1 and 2 workers"


def check_exactness():
    problem, disc, dW, paths = _small_setup(n_steps=8)
    Z = run(problem, disc.config, dW, disc=disc)
    R = residual(Z, disc, dW)
    assert np.max(np.abs(R.values)) <= 1e-12
    rng = np.random.default_rng(5)
    V = rng.standard_normal(R.values.shape) * 0.1
    Y = reconstruct(V, disc, dW)
    assert np.max(np.abs(residual(Y, disc, dW).values - V)) <= 1e-10
    dev = telescoping_check(assemble(Mesh1D(32)), 1.0 / 16, 8)
    assert dev <= 1e-10, dev
    it = iterated_integrals(paths[0], 8, 16).values
    d = paths[0].increments[:, :8]
    assert np.array_equal(np.diagonal(it, axis1=1, axis2=2), 0.5 * (d * d - disc.k))
    sym = it + np.swapaxes(it, 1, 2)
    off = ~np.eye(8, dtype=bool)
    prod = (d[:, :, None] * d[:, None, :])[:, off]
    # I_(j,i) is stored as prod - I_(i,j); the sum returns prod up to one rounding
    scale = np.abs(prod) + np.abs(it[:, off])
    assert np.all(np.abs(sym[:, off] - prod) <= 4 * np.finfo(float).eps * scale)
    c4 = coarsen(paths[0], 4)
    c22 = coarsen(coarsen(paths[0], 2), 2)
    assert np.array_equal(c4.increments, c22.increments)
    assert burkholder_constant(2.0) == 1.0
    return f"residual 0, round trip, telescoping {dev:.1e}, identities exact"


CHECKS = {
    "projectors": check_projectors,
    "negative_norm": check_negative_norm,
    "discrete_smoothing": check_discrete_smoothing,
    "gronwall": check_gronwall,
    "spijker_oracle": check_spijker_oracle,
    "nemytskii_derivatives": check_nemytskii_derivatives,
    "rng_reproducibility": check_rng_reproducibility,
    "exactness": check_exactness,
}


def run_checks(names=None, echo=print) -> bool:
    ok = True
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            detail = CHECKS[name]()
            status = "PASS"
        except AssertionError as exc:
            detail = str(exc) or "assertion failed"
            status = "FAIL"
            ok = False
        echo(f"{status} {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok
