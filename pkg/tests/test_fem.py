import numpy as np
import pytest
from hypothesis import given, strategies as st

from spde_milstein.fem import (Mesh1D, assemble, error_operator, error_operator_norm,
                               gauss_quadrature, integrated_error_operator_norm, prolong,
                               prolongation)
from spde_milstein.spectral import laplacian_eigenpairs


def test_mesh_validation():
    with pytest.raises(ValueError):
        Mesh1D(1)
    m = Mesh1D(4)
    assert m.n_nodes == 3 and np.allclose(m.nodes, [0.25, 0.5, 0.75])


def test_stencils_n4():
    ops = assemble(Mesh1D(4))
    assert ops.stiffness[0, 0] == pytest.approx(8.0) and ops.stiffness[0, 1] == pytest.approx(-4.0)
    assert ops.mass[0, 0] == pytest.approx(1 / 6) and ops.mass[0, 1] == pytest.approx(1 / 24)


def test_stencils_by_exact_integration():
    # integrate hat products with a fine Gauss rule as an independent oracle
    mesh = Mesh1D(8)
    ops = assemble(mesh)
    quad = gauss_quadrature(mesh, 1, 4)
    H = quad.interp.toarray()  # hat values at points
    M = (H.T * quad.weights) @ H
    assert np.allclose(M, ops.mass, atol=1e-14)
    # derivatives: piecewise constant +-1/h
    dH = np.zeros_like(H)
    cell = np.floor(quad.points * mesh.n_cells).astype(int)
    for i in range(mesh.n_nodes):
        dH[cell == i, i] = 1 / mesh.h
        dH[cell == i + 1, i] = -1 / mesh.h
    K = (dH.T * quad.weights) @ dH
    assert np.allclose(K, ops.stiffness, atol=1e-10)


def test_spd_and_row_sums():
    ops = assemble(Mesh1D(16))
    assert np.linalg.eigvalsh(ops.mass).min() > 0
    assert np.linalg.eigvalsh(ops.stiffness).min() > 0
    assert np.allclose(ops.stiffness[1:-1].sum(axis=1), 0)


def test_lift_matrix_against_quadrature():
    mesh = Mesh1D(16)
    ops = assemble(mesh)
    basis = laplacian_eigenpairs(40)
    quad = gauss_quadrature(mesh, 8, 6)
    L = (basis.matrix(quad.points) * quad.weights) @ quad.interp.toarray()
    assert np.max(np.abs(L - ops.lift_matrix(40))) < 1e-12


def test_projection_idempotent_and_contractive(rng):
    ops = assemble(Mesh1D(32))
    basis = laplacian_eigenpairs(128)
    c = rng.standard_normal(ops.n)
    x = ops.to_spectral(c, basis)
    # x is the (truncated) spectral image of c, P_h should recover c up to the truncation
    back = ops.solve_mass(ops.mass_matvec(c))
    assert np.max(np.abs(back - c)) < 1e-12
    fun = lambda t: np.sin(3 * t) * t  # noqa: E731
    ph = ops.project_function(fun)
    assert np.max(np.abs(ops.project_function(lambda t: gauss_eval(ops, ph, t)) - ph)) < 1e-12
    for _ in range(20):
        y = rng.standard_normal(128) / np.arange(1, 129)
        assert ops.h_norm(ops.project_spectral(y, basis)) <= np.linalg.norm(y) + 1e-14
    assert x.shape == (128,)


def gauss_eval(ops, c, t):
    quad_like = np.interp(t, np.concatenate([[0], ops.mesh.nodes, [1]]),
                          np.concatenate([[0], c, [0]]))
    return quad_like


def test_projection_rate():
    basis = laplacian_eigenpairs(8)
    e1 = np.eye(8)[0]
    errs = [assemble(Mesh1D(n)).distance_to_spectral(
        assemble(Mesh1D(n)).project_spectral(e1, basis), e1, basis) for n in (64, 128)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_ritz_rate_and_stability():
    basis = laplacian_eigenpairs(8)
    e1 = np.eye(8)[0]
    x = e1 / np.sqrt(2)  # sin(pi xi)
    errs = []
    for n in (32, 64):
        ops = assemble(Mesh1D(n))
        c = ops.ritz_spectral(x, basis)
        errs.append(ops.distance_to_spectral(c, x, basis))
        assert ops.h1_norm(c) <= np.pi / np.sqrt(2) + 1e-12
    assert 3.6 <= errs[0] / errs[1] <= 4.4


def test_ritz_identity_on_vh(rng):
    ops = assemble(Mesh1D(16))
    c = rng.standard_normal(ops.n)
    # R_h of a V_h member: K c = (c, phi)_1 = K c
    assert np.allclose(ops.solve_stiffness(ops.stiffness_matvec(c)), c, atol=1e-12)


def test_step_limits_and_contraction(rng):
    ops = assemble(Mesh1D(32))
    c = rng.standard_normal(ops.n)
    assert np.max(np.abs(ops.step(c, 1e-14) - c)) <= 1e-9
    for _ in range(100):
        c = rng.standard_normal(ops.n)
        assert ops.h_norm(ops.step(c, 0.01)) <= ops.h_norm(c) * (1 + 1e-14)
    with pytest.raises(ValueError):
        ops.step(c, 0.0)


def test_step_power_matches_pencil():
    ops = assemble(Mesh1D(16))
    basis = laplacian_eigenpairs(16)
    lam, V = ops.pencil
    k, n = 0.01, 10
    c0 = ops.project_spectral(np.eye(16)[0], basis)
    cn = ops.step_power(c0, k, n)
    coef = V.T @ ops.mass @ c0
    assert np.allclose(cn, V @ (coef / (1 + k * lam) ** n), atol=1e-12)
    # the e_1 component is dominated by the smallest pencil eigenvalue
    ratio = ops.h_norm(cn) / ops.h_norm(c0)
    assert ratio == pytest.approx((1 + k * lam[0]) ** -n, rel=1e-3)


def test_nesting_preserves_norm(rng):
    coarse, fine = Mesh1D(8), Mesh1D(16)
    c = rng.standard_normal(coarse.n_nodes)
    f = prolong(c, coarse, fine)
    assert assemble(fine).h_norm(f) == pytest.approx(assemble(coarse).h_norm(c), rel=1e-12)
    with pytest.raises(ValueError):
        prolongation(Mesh1D(6), Mesh1D(16))


def test_ph_h1_stability(rng):
    ops = assemble(Mesh1D(32))
    basis = laplacian_eigenpairs(64)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(64) / np.arange(1, 65) ** 2.5
        c = ops.project_spectral(x, basis)
        worst = max(worst, ops.h1_norm(c) / np.sqrt(np.sum(basis.eigenvalues * x * x)))
    assert worst <= 2.0


def test_error_operator_examples():
    ops = assemble(Mesh1D(16))
    basis = laplacian_eigenpairs(32)
    assert np.allclose(error_operator(0.5, np.zeros(32), 0.1, ops, basis), 0)
    with pytest.raises(ValueError):
        error_operator(0.0, np.zeros(32), 0.1, ops, basis)
    e1 = np.eye(32)[0]
    errs = []
    for n, k in ((16, 1 / 16), (32, 1 / 64), (64, 1 / 256)):
        o = assemble(Mesh1D(n))
        errs.append(error_operator_norm(0.5, e1, k, o, basis))
    r = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((r > 3.3) & (r < 4.7))


def test_integrated_error_norm_matches_numerical_integral():
    ops = assemble(Mesh1D(8))
    basis = laplacian_eigenpairs(32)
    e1 = np.eye(32)[0]
    k, T = 0.125, 0.5
    closed = integrated_error_operator_norm(e1, k, T, ops, basis)
    # midpoint rule per step interval
    g, w = np.polynomial.legendre.leggauss(20)
    total = 0.0
    for j in range(4):
        a = j * k
        for gi, wi in zip(g, w):
            t = a + 0.5 * k * (gi + 1)
            total += 0.5 * k * wi * error_operator_norm(t, e1, k, ops, basis) ** 2
    assert closed == pytest.approx(np.sqrt(total), rel=1e-8)


@given(st.integers(2, 40))
def test_quadrature_reproduces_mass(n):
    mesh = Mesh1D(n)
    quad = gauss_quadrature(mesh, 2, 3)
    ops = assemble(mesh)
    c = np.sin(np.arange(mesh.n_nodes) + 1.0)
    assert np.allclose(quad.load(quad.to_points(c)), ops.mass_matvec(c), atol=1e-13)
