import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoslab.errors import ValidationError
from chaoslab.kernel import make_grid, sample_brownian
from chaoslab.meanfield import (
    InteractionSpec,
    PicardParams,
    SchemeParams,
    interaction_preset,
    solve_interacting,
    solve_linear_interaction,
    solve_mkv,
)
from chaoslab.regression import BasisSpec, DriverSpec, solve_backward
from chaoslab.transport import wasserstein_1d

BASIS = BasisSpec(degree=1, shared_degree=1)
SMALL = SchemeParams(batch=2048, min_systems=16)


def test_null_preset_tracks_brownian_paths():
    g = make_grid(1.0, 16)
    b = sample_brownian(1, 0, 8, 1, g)
    sol = solve_interacting(interaction_preset("null", terminal_params={"g": 0.0}), b, BASIS)
    W = b.paths().transpose(1, 0, 2)
    assert np.max(np.abs(sol.y - W)) < 0.1


def test_single_particle_mean_interaction_is_linear_bsde():
    # with n = 1 the empirical mean is the particle itself: F = y, Y_0 = e E[G]
    g = make_grid(1.0, 32)
    spec = interaction_preset("mean-linear", alpha=1.0, terminal_params={"g": 1.0, "scale": 1.0})
    sol = solve_interacting(spec, sample_brownian(2, 0, 1, 1, g), BASIS)
    assert abs(sol.y[0, 0, 0] - math.e) < 0.05


def test_system_average_follows_mean_ode():
    g = make_grid(1.0, 16)
    spec = interaction_preset("mean-linear", alpha=0.5, terminal_params={"g": 1.0, "scale": 0.5})
    avgs = [solve_interacting(spec, sample_brownian(3, r, 16, 1, g), BASIS, SMALL).mean_path()[0, 0]
            for r in range(20)]
    # the t = 0 average of a 16-particle system has sd about 0.5 e^{0.5} / 4
    assert abs(np.mean(avgs) - math.exp(0.5)) < 3 * 0.21 / math.sqrt(20)


def test_mkv_gaussian_martingale_law():
    g = make_grid(1.0, 16)
    spec = interaction_preset("null", terminal_params={"g": 0.0, "scale": 1.0})
    mkv = solve_mkv(spec, 4096, sample_brownian(4, 0, 4096, 1, g), BasisSpec(1))
    var_T = mkv.law_flow[-1].points.var()
    assert abs(var_T - 1.0) < 4 * math.sqrt(2 / 4096)
    var_half = mkv.law_flow[8].points.var()
    assert abs(var_half - 0.5) < 0.1


def test_mkv_mean_flow_matches_ode():
    g = make_grid(1.0, 32)
    spec = interaction_preset("mean-linear", alpha=0.5, terminal_params={"g": 1.0, "scale": 0.5})
    mkv = solve_mkv(spec, 4096, sample_brownian(5, 0, 4096, 1, g), BasisSpec(1), PicardParams(tol=1e-4))
    assert mkv.converged and mkv.iterations <= 10
    err = np.abs(mkv.mean_flow()[:, 0] - mkv.reference_mean_flow)
    assert err.max() < 0.03


def test_mkv_mean_flow_error_shrinks_with_cloud():
    g = make_grid(1.0, 8)
    spec = interaction_preset("mean-linear", alpha=0.5, terminal_params={"g": 1.0, "scale": 1.0})

    def err(M):
        out = []
        for s in range(6):
            mkv = solve_mkv(spec, M, sample_brownian(s, 0, M, 1, g), BasisSpec(1))
            out.append(np.max(np.abs(mkv.mean_flow()[:, 0] - mkv.reference_mean_flow)))
        return np.mean(out)

    assert err(4096) < err(256)


def test_constant_terminal_gives_point_mass_flow():
    g = make_grid(1.0, 8)
    spec = interaction_preset("null", terminal="constant", terminal_params={"c": 2.5})
    mkv = solve_mkv(spec, 64, sample_brownian(6, 0, 64, 1, g), BasisSpec(1))
    for mu in mkv.law_flow:
        assert wasserstein_1d(2, mu.points[:, 0], np.full(64, 2.5)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.permutations(list(range(6))))
def test_permuting_particle_streams_permutes_output(perm):
    g = make_grid(1.0, 4)
    spec = interaction_preset("mean-reversion", kappa=1.0)
    base = solve_interacting(spec, sample_brownian(7, 0, 6, 1, g), BASIS, SMALL)
    permuted = solve_interacting(spec, sample_brownian(7, 0, 6, 1, g, particles=perm), BASIS, SMALL)
    np.testing.assert_array_equal(permuted.y, base.y[:, perm])


def test_terminal_slices_agree_bit_exactly():
    g = make_grid(1.0, 8)
    spec = interaction_preset("mean-linear", alpha=0.5)
    b = sample_brownian(8, 0, 64, 1, g)
    sys = solve_interacting(spec, b, BASIS, SMALL)
    mkv = solve_mkv(spec, 64, b, BasisSpec(1))
    np.testing.assert_array_equal(sys.y[-1], mkv.cloud(g.N))


def test_null_kernel_matches_independent_bsdes():
    g = make_grid(1.0, 16)
    spec = InteractionSpec(kind="linear-f", terminal=interaction_preset("null").terminal,
                           outer=lambda t, y, z, a: 0.5 * y + a,
                           inner=lambda t, y1, y2, z: np.zeros(np.broadcast_shapes(y1.shape, y2.shape)),
                           lipschitz_F=1.0, lipschitz_f=0.0)
    b = sample_brownian(9, 0, 8, 1, g)
    sys = solve_linear_interaction(spec, b, BasisSpec(1))
    drv = DriverSpec(lambda t, x, y, z, mu: 0.5 * y, 0.5, 0.0, 0.0, 0.5)
    ref = solve_backward(drv, spec.terminal, sample_brownian(9, 0, 8192, 1, g), BasisSpec(1))
    np.testing.assert_allclose(sys.y, ref.y[:, :8], atol=0.05)


def test_convolution_keeps_average_constant():
    g = make_grid(1.0, 16)
    spec = interaction_preset("convolution", kappa=1.0, terminal_params={"g": 1.0, "scale": 0.5})
    avgs = [solve_linear_interaction(spec, sample_brownian(10, r, 16, 1, g), BASIS, SMALL).mean_path()[0, 0]
            for r in range(20)]
    assert abs(np.mean(avgs) - 1.0) < 0.05


def test_pairwise_and_closed_form_averages_agree():
    g = make_grid(1.0, 8)
    fast = interaction_preset("convolution", kappa=0.8)
    slow = InteractionSpec(kind="linear-f", terminal=fast.terminal, outer=fast.outer, inner=fast.inner,
                           lipschitz_F=1.0, lipschitz_f=0.8)
    b = sample_brownian(11, 0, 12, 1, g)
    a = solve_linear_interaction(fast, b, BASIS, SMALL).y
    c = solve_linear_interaction(slow, b, BASIS, SMALL).y
    np.testing.assert_allclose(a, c, rtol=1e-10, atol=1e-12)


def test_mean_kernel_and_mean_linear_coincide():
    g = make_grid(1.0, 8)
    lin = interaction_preset("mean-kernel", alpha=0.5)
    gen = interaction_preset("mean-linear", alpha=0.5)
    b = sample_brownian(12, 0, 16, 1, g)
    np.testing.assert_allclose(solve_interacting(lin, b, BASIS, SMALL).y,
                               solve_interacting(gen, b, BASIS, SMALL).y, rtol=1e-10, atol=1e-12)


def test_linear_solver_requires_linear_kind():
    g = make_grid(1.0, 4)
    with pytest.raises(ValidationError):
        solve_linear_interaction(interaction_preset("mean-linear"), sample_brownian(0, 0, 4, 1, g), BASIS)


def test_unknown_preset_lists_registered():
    with pytest.raises(ValidationError, match="mean-linear"):
        interaction_preset("no-such-thing")
    with pytest.raises(ValidationError, match="brownian"):
        interaction_preset("null", terminal="nope")


def test_cloud_size_validation():
    g = make_grid(1.0, 4)
    with pytest.raises(ValidationError):
        solve_mkv(interaction_preset("null"), 1, sample_brownian(0, 0, 4, 1, g), BASIS)


def test_reference_indices_are_nested_and_distinct():
    g = make_grid(1.0, 4)
    mkv = solve_mkv(interaction_preset("null"), 256, sample_brownian(0, 0, 256, 1, g), BasisSpec(1))
    a = mkv.reference_indices(3, 1, 16)
    b = mkv.reference_indices(3, 1, 64)
    assert len(set(a)) == 16 and np.array_equal(a, b[:16])
    with pytest.raises(ValidationError):
        mkv.reference_indices(3, 1, 1000)
