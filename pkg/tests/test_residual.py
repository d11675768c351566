import numpy as np
import pytest
from hypothesis import given, strategies as st

from spde_milstein.fem import Mesh1D, assemble
from spde_milstein.noise import TimeGrid, sample_increments
from spde_milstein.problem import build_problem
from spde_milstein.residual import (InconsistentRatio, burkholder_constant, consistency_terms,
                                    gronwall_check, gronwall_constant, lp_estimate, lp_max,
                                    reconstruct, residual, spijker_norm, spijker_norm_dense,
                                    sup_norm, telescoping_check, two_sided_ratio)
from spde_milstein.scheme import Discretization, SchemeConfig, run


def setup(N=8, n_cells=16, n_modes=32, paths=3, variant="milstein", k=None):
    p = build_problem(n_modes=n_modes)
    grid = TimeGrid(k or 1.0 / N, N)
    c = SchemeConfig(variant, grid, Mesh1D(n_cells))
    d = Discretization(p, c)
    dW = np.stack([sample_increments(n_modes, grid, 4, i) for i in range(paths)])
    return p, c, d, dW


def test_residual_of_scheme_is_zero():
    p, c, d, dW = setup()
    out = run(p, c, dW, disc=d)
    assert np.max(np.abs(residual(out, d, dW).values)) <= 1e-12


def test_round_trip(rng):
    p, c, d, dW = setup()
    Z = rng.standard_normal((3, 9, d.ops.n))
    back = reconstruct(residual(Z, d, dW), d, dW).states
    assert np.max(np.abs(back - Z)) <= 1e-10


def test_residual_grid_mismatch():
    p, c, d, dW = setup()
    with pytest.raises(ValueError):
        residual(np.zeros((3, 5, d.ops.n)), d, dW)


def test_spijker_examples():
    ops = assemble(Mesh1D(16))
    V = np.zeros((2, 6, ops.n))
    assert spijker_norm(V, 0.1, ops).spijker == 0.0
    c = np.sin(np.arange(ops.n) + 1.0)
    V[:, 0] = c
    assert spijker_norm(V, 0.1, ops).spijker == pytest.approx(ops.h_norm(c))
    V = np.zeros((1, 6, ops.n))
    V[:, 1] = c
    rep = spijker_norm(V, 0.1, ops)
    assert rep.spijker == pytest.approx(ops.h_norm(ops.step(c, 0.1) * 0 + c))
    with pytest.raises(ValueError):
        spijker_norm(V, 0.1, ops, p=1.5)


def test_spijker_dominated_by_sum(rng):
    ops = assemble(Mesh1D(8))
    V = rng.standard_normal((4, 6, ops.n))
    rep = spijker_norm(V, 0.05, ops)
    sum_bound = sum(lp_estimate(ops.h_norm(V[:, n]), 2)[0] for n in range(6))
    assert rep.spijker <= sum_bound * (1 + 1e-12)
    assert rep.sup <= rep.spijker * 2 + 1e-12


@given(st.integers(0, 10 ** 6), st.sampled_from([2.0, 3.0, 4.0]))
def test_spijker_matches_dense_oracle(seed, p):
    ops = assemble(Mesh1D(8))
    V = np.random.default_rng(seed).standard_normal((3, 5, ops.n))
    assert spijker_norm(V, 0.1, ops, p).spijker == pytest.approx(
        spijker_norm_dense(V, 0.1, ops, p), rel=1e-10)


def test_lp_estimators():
    v, se = lp_estimate(np.full(10, 2.0), 2)
    assert v == 2.0 and se == 0.0
    val, se, i = lp_max(np.array([[1.0, 3.0], [1.0, 3.0]]), 4)
    assert val == 3.0 and i == 1


def test_two_sided_ratio():
    assert two_sided_ratio(0.0, 0.0) == 1.0
    assert two_sided_ratio(2.0, 4.0) == 0.5
    with pytest.raises(InconsistentRatio):
        two_sided_ratio(1.0, 0.0)


def test_sup_norm_of_constant_process():
    ops = assemble(Mesh1D(8))
    Z = np.ones((5, 3, ops.n))
    assert sup_norm(Z, ops)[0] == pytest.approx(ops.h_norm(np.ones(ops.n)))


def test_gronwall_examples():
    assert gronwall_check([1, 1, 1], 1.0, 0.0, 1.0, 0.1).holds
    # C2 = 1, eta = 1: y_n = (1+k)^n
    k = 0.1
    y = (1 + k) ** np.arange(11)
    r = gronwall_check(y, 1.0, 1.0, 1.0, k)
    assert r.holds and r.constant == pytest.approx((1 + k) ** 10)
    assert gronwall_constant(1.0, 1.0, 1.0, k) == pytest.approx((1 + k) ** 10)
    assert not gronwall_check(y * 1.01, 1.0, 1.0, 1.0, k).holds
    with pytest.raises(ValueError):
        gronwall_check([1, 1], 0.0, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        gronwall_constant(1.0, 1.0, 0.0, 0.1)


@given(st.floats(0.05, 3.0), st.floats(0.1, 1.0), st.sampled_from([0.1, 0.05, 0.02]))
def test_gronwall_extremal_sequence(C2, eta, k):
    N = int(round(1 / k))
    y = np.ones(N + 1)
    for n in range(1, N + 1):
        j = np.arange(1, n + 1)
        y[n] = 1 + C2 * k * np.sum((k * (n - j + 1)) ** (eta - 1) * y[j - 1])
    r = gronwall_check(y, 1.0, C2, eta, k, rtol=1e-10)
    assert r.holds and r.constant <= r.bound * (1 + 1e-10)


def test_burkholder():
    assert burkholder_constant(2.0) == 1.0
    assert burkholder_constant(4.0) == pytest.approx(np.sqrt(6) * 4 / 3)
    with pytest.raises(ValueError):
        burkholder_constant(1.0)


def test_telescoping():
    ops = assemble(Mesh1D(32))
    assert telescoping_check(ops, 1 / 8, 8) <= 1e-10
    assert telescoping_check(ops, 1 / 8, 8, diagonal=True) <= 1e-12


def test_consistency_terms_bound_spijker():
    p = build_problem(n_modes=32)
    mesh = Mesh1D(16)
    fine = SchemeConfig("milstein", TimeGrid(1 / 32, 32), mesh)
    coarse = SchemeConfig("milstein", TimeGrid(1 / 8, 8), mesh)
    fd = Discretization(p, fine)
    cd = Discretization(p, coarse, fd.ops)
    dW = np.stack([sample_increments(32, fine.grid, 9, i) for i in range(20)])
    ref = run(p, fine, dW, disc=fd)
    terms = consistency_terms(ref, fd, cd, dW)
    assert terms.spijker <= terms.total * (1 + 1e-9) + terms.initial
    assert min(terms.as_tuple()) >= 0
    with pytest.raises(ValueError):
        consistency_terms(ref, fd, Discretization(p, SchemeConfig("milstein", coarse.grid,
                                                                  Mesh1D(8))), dW)
