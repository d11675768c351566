import numpy as np
import pytest
from hypothesis import given, strategies as st

from spde_milstein.fem import Mesh1D, assemble
from spde_milstein.problem import (REGISTRY, ConfigError, NemytskiiDiffusion, apply_diffusion_mode,
                                   apply_drift, build_problem, default_problem, hs_norm,
                                   hs_norm_by_modes, load_config, lookup)


def test_defaults():
    p = default_problem()
    assert p.n_modes == 256 and p.covariance.eigenvalues[0] == pytest.approx(1.0)
    assert p.covariance.eigenvalues[1] == pytest.approx(0.25)
    assert p.x0[0] == 1.0 and p.x0[2] == 0.5


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        build_problem(beta=0.5)
    with pytest.raises(ConfigError):
        build_problem(nonsense=1)
    with pytest.raises(ConfigError):
        build_problem(drift="unknown")
    with pytest.raises(ConfigError):
        build_problem(r=1.0)
    with pytest.raises(ConfigError):
        build_problem(p=1.5)
    bad = tmp_path / "c.yaml"
    bad.write_text("other: {}\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    good = tmp_path / "g.yaml"
    good.write_text("problem:\n  beta: 3.0\nexperiment:\n  n_paths: 5\n")
    assert load_config(good)["problem"]["beta"] == 3.0


def test_constant_lookup():
    c = lookup("const:2.5")
    assert np.all(c(np.zeros(3)) == 2.5)
    assert NemytskiiDiffusion(c).is_additive


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_registry_derivatives_and_lipschitz(name):
    f = REGISTRY[name]
    u = np.linspace(-5, 5, 2001)
    h = 1e-6
    fd = (f(u + h) - f(u - h)) / (2 * h)
    assert np.max(np.abs(fd - f.deriv(u))) < 1e-6
    assert np.max(np.abs(f.deriv(u))) <= f.lipschitz + 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20),
       st.lists(st.floats(-50, 50), min_size=2, max_size=20),
       st.sampled_from(sorted(REGISTRY)))
def test_drift_lipschitz_in_h(a, b, name):
    n = min(len(a), len(b))
    x, y = np.array(a[:n]), np.array(b[:n])
    ops = assemble(Mesh1D(n + 1))
    f = REGISTRY[name]
    lhs = ops.h_norm(apply_drift(x, _drift(f)) - apply_drift(y, _drift(f)))
    # nodal interpolation of a Lipschitz map: ||I_h(b(x)) - I_h(b(y))|| <= sqrt(3) L ||x - y||
    assert lhs <= np.sqrt(3) * f.lipschitz * ops.h_norm(x - y) + 1e-12


def _drift(f):
    from spde_milstein.problem import NemytskiiDrift
    return NemytskiiDrift(f)


def test_apply_diffusion_mode_identity():
    p = build_problem(diffusion="one", n_modes=16)
    ops = assemble(Mesh1D(32))
    c = apply_diffusion_mode(np.zeros(ops.n), 1, p, ops)
    target = ops.project_spectral(np.eye(16)[0], p.basis)
    assert np.allclose(c, target, atol=1e-13)
    with pytest.raises(ValueError):
        apply_diffusion_mode(np.zeros(ops.n), 17, p, ops)


def test_apply_diffusion_mode_nodal():
    p = build_problem(diffusion="identity", n_modes=8)
    ops = assemble(Mesh1D(8))
    x = np.arange(1.0, 8.0)
    expected = x * p.basis.eval(2, ops.mesh.nodes)
    assert np.allclose(apply_diffusion_mode(x, 2, p, ops, "nodal"), expected)


def test_hs_norm_additive_equals_trace():
    p = build_problem(diffusion="one", n_modes=32)
    ops = assemble(Mesh1D(32))
    val = hs_norm(np.zeros(ops.n), p, ops)
    assert val == pytest.approx(np.sqrt(p.covariance.trace()), rel=1e-10)


def test_hs_norm_two_ways(rng):
    p = build_problem(n_modes=24)
    ops = assemble(Mesh1D(16))
    x = rng.standard_normal(ops.n)
    for s in (0.0, 0.5):
        assert hs_norm(x, p, ops, s) == pytest.approx(hs_norm_by_modes(x, p, ops, s), rel=1e-10)
