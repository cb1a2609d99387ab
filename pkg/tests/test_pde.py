import math

import numpy as np
import pytest

from chaoslab.chaos import fit_rate
from chaoslab.errors import ValidationError
from chaoslab.kernel import make_grid, sample_brownian
from chaoslab.meanfield import SchemeParams
from chaoslab.pde import (
    PdeScenario,
    compare_pde,
    epsilon_cd,
    pde_preset,
    solve_master_fbsde,
    solve_particle_fbsde,
)
from chaoslab.regression import BasisSpec, DriverSpec, solve_backward

GRID = make_grid(1.0, 8)
BASIS = BasisSpec(degree=1, shared_degree=1)


def test_epsilon_cd_tabulated():
    assert epsilon_cd(100, 3) == pytest.approx(0.1, abs=1e-12)
    assert epsilon_cd(16, 4) == pytest.approx(0.25 * math.log(16), abs=1e-12)
    assert epsilon_cd(16, 4) == pytest.approx(0.6931, abs=1e-4)
    assert epsilon_cd(32, 8) == pytest.approx(32 ** -0.25, abs=1e-12)
    assert epsilon_cd(32, 8) == pytest.approx(0.4204, abs=1e-4)
    np.testing.assert_allclose(epsilon_cd(np.array([4, 9]), 1), [0.5, 1 / 3])
    with pytest.raises(ValidationError):
        epsilon_cd(0, 1)
    with pytest.raises(ValidationError):
        epsilon_cd(4, 0)


@pytest.mark.parametrize("beta,gamma", [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
def test_particle_affine_values(beta, gamma):
    sc = pde_preset("affine", beta=beta, gamma=gamma)
    sol = solve_particle_fbsde(sc, 8, sample_brownian(1, 0, 8, 1, GRID), BASIS, SchemeParams(batch=32768))
    xi = sol.xi[:, 0]
    np.testing.assert_allclose(sol.v0[:, 0], beta * xi + gamma * xi.mean(), atol=0.05)


def test_particle_constant_is_exact():
    sc = pde_preset("constant", c=3.0)
    sol = solve_particle_fbsde(sc, 5, sample_brownian(1, 0, 5, 1, GRID), BASIS)
    np.testing.assert_allclose(sol.Y, 3.0, rtol=1e-14)


@pytest.mark.parametrize("name", ["affine", "discounted", "mean-reverting", "constant"])
def test_master_closed_forms(name):
    sc = pde_preset(name)
    ms = solve_master_fbsde(sc, 8192, sample_brownian(2, 0, 8192, 1, GRID), BasisSpec(1))
    xs = np.array([[-1.0], [0.0], [0.5], [1.5]])
    want = sc.closed_form(0.0, xs, np.array([sc.initial_mean]))
    np.testing.assert_allclose(ms.V(xs)[:, 0], want, atol=0.06)


def test_constant_gaps_zero():
    res = compare_pde(pde_preset("constant", c=-1.0), [2, 4], 3, 256, grid=GRID, seed=1, empirical_cloud=64)
    for r in res:
        assert r.gap == 0.0 and r.empirical_gap == pytest.approx(0.0, abs=1e-24)


def test_affine_gap_is_variance_of_mean():
    res = compare_pde(pde_preset("affine"), [4, 16], 48, 16384, grid=GRID, seed=5, empirical_gap=False)
    for r in res:
        # gamma^2 Var(xi) / n with unit variance; chi-square noise at 48 reps is about 20%
        assert r.gap * r.n == pytest.approx(1.0, rel=0.6)
        assert r.epsilon_n == pytest.approx(r.n ** -0.5)
        assert r.epsilon_n_plus_r > r.epsilon_n


def test_discounted_slope():
    ns = [8, 16, 32, 64, 128]
    res = compare_pde(pde_preset("discounted", a=0.5), ns, 32, 16384, grid=GRID, seed=7, empirical_gap=False)
    slope, _, _ = fit_rate(ns, [r.gap for r in res])
    assert slope <= -0.5


def test_empirical_gap_small_for_affine():
    # V(x, L^n(xi)) with the empirical initial law reproduces the particle value
    res = compare_pde(pde_preset("affine"), [8], 6, 2048, grid=GRID, seed=3, empirical_cloud=2048)
    assert res[0].empirical_gap < 0.05 < res[0].gap + 0.05


def test_single_particle_agrees_with_singleton_master_and_plain_bsde():
    sc = pde_preset("affine", beta=1.0, gamma=1.0)
    x0 = 1.0
    b = sample_brownian(9, 0, 1, 1, GRID)
    # regression coefficients carry standard error ~ 2 / sqrt(M): M = 65536 keeps it near 0.008
    v = solve_particle_fbsde(sc, 1, b, BASIS, SchemeParams(batch=65536), xi=np.array([[x0]])).v0[0, 0]
    cloud = sample_brownian(9, 0, 65536, 1, GRID)
    ms = solve_master_fbsde(sc.singleton(x0), 65536, cloud, BasisSpec(1))
    V = ms.V(np.array([[x0]]))[0, 0]
    # plain BSDE for G = 2 (x0 + W_T) on the same cloud
    drv = DriverSpec(lambda t, x, y, z, mu: np.zeros_like(y), 0.0, 0.0, 0.0, 0.0)
    from chaoslab.regression import TerminalSpec
    plain = solve_backward(drv, TerminalSpec(lambda paths, law: 2 * (x0 + paths[-1]), moment_order=4),
                           cloud, BasisSpec(1))
    assert v == pytest.approx(2.0, abs=0.02)
    assert V == pytest.approx(2.0, abs=0.02)
    # the master and the plain solve share every path
    assert V == pytest.approx(plain.y[0].mean(), abs=1e-10)
    assert abs(v - plain.y[0].mean()) <= 0.02


def test_forward_interaction_preset():
    sc = pde_preset("mean-reverting", kappa=1.0, beta=1.0, gamma=0.0)
    sol = solve_particle_fbsde(sc, 6, sample_brownian(4, 0, 6, 1, GRID), BASIS, SchemeParams(batch=4096))
    xi = sol.xi[:, 0]
    # the discrete Euler decay factor applies to deviations from the mean
    decay = (1 - 1.0 / GRID.N) ** GRID.N
    want = xi.mean() + (xi - xi.mean()) * decay
    np.testing.assert_allclose(sol.v0[:, 0], want, atol=0.05)


def test_validation():
    with pytest.raises(ValidationError):
        pde_preset("nope")
    with pytest.raises(ValidationError):
        pde_preset("affine", moment_order=4.0)
    with pytest.raises(ValidationError):
        solve_particle_fbsde(pde_preset("affine"), 4, sample_brownian(1, 0, 3, 1, GRID), BASIS)
    with pytest.raises(ValidationError):
        solve_master_fbsde(pde_preset("affine"), 1, sample_brownian(1, 0, 3, 1, GRID), BASIS)
    assert isinstance(pde_preset("affine"), PdeScenario)
