import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoslab.errors import ValidationError
from chaoslab.kernel import (
    STREAM_CLOUD,
    BrownianBundle,
    make_grid,
    philox4x32,
    sample_brownian,
    uniforms,
)
from oracles import PHILOX_KAT


@pytest.mark.parametrize("counter,key,expected", PHILOX_KAT)
def test_philox_known_answers(counter, key, expected):
    out = philox4x32(counter, key)
    assert tuple(int(w) for w in out) == expected


def test_grid_nodes():
    g = make_grid(1.0, 4)
    np.testing.assert_array_equal(g.nodes, [0, 0.25, 0.5, 0.75, 1.0])
    assert make_grid(2.0, 1).nodes.tolist() == [0.0, 2.0]
    assert g.index_of(0.5) == 2


@pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (float("nan"), 3)])
def test_grid_rejects(T, N):
    with pytest.raises(ValidationError):
        make_grid(T, N)


def test_same_inputs_bit_identical():
    g = make_grid(1.0, 8)
    a = sample_brownian(11, 3, 5, 2, g)
    b = sample_brownian(11, 3, 5, 2, g)
    assert a.to_bytes() == b.to_bytes()


def test_stream_extension():
    g = make_grid(1.0, 8)
    a = sample_brownian(5, 0, 2, 1, g)
    b = sample_brownian(5, 0, 3, 1, g)
    np.testing.assert_array_equal(a.increments, b.increments[:2])


def test_streams_and_replications_differ():
    g = make_grid(1.0, 8)
    base = sample_brownian(5, 0, 4, 1, g).increments
    assert not np.array_equal(base, sample_brownian(5, 1, 4, 1, g).increments)
    assert not np.array_equal(base, sample_brownian(5, 0, 4, 1, g, stream=STREAM_CLOUD).increments)
    assert not np.array_equal(base, sample_brownian(6, 0, 4, 1, g).increments)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(6))), st.integers(0, 2**64 - 1))
def test_permuting_particle_ids_permutes_paths(perm, seed):
    g = make_grid(1.0, 3)
    base = sample_brownian(seed, 2, 6, 2, g).increments
    permuted = sample_brownian(seed, 2, 6, 2, g, particles=perm).increments
    np.testing.assert_array_equal(permuted, base[perm])


def test_increment_variance_chi_square():
    # 10^5 increments with dt = 0.01: the sample variance has standard error
    # dt * sqrt(2 / (M - 1)) for Gaussian data
    g = make_grid(1.0, 100)
    inc = sample_brownian(2024, 0, 1000, 1, g).increments.ravel()
    M = inc.size
    se = 0.01 * np.sqrt(2.0 / (M - 1))
    assert abs(inc.var(ddof=1) - 0.01) < 3 * se
    assert abs(inc.mean()) < 3 * 0.1 / np.sqrt(M)


def test_cross_particle_independence():
    g = make_grid(1.0, 4)
    x = np.stack([sample_brownian(9, r, 2, 1, g).increments[:, 0, 0] for r in range(4000)])
    corr = np.corrcoef(x[:, 0], x[:, 1])[0, 1]
    assert abs(corr) < 4 / np.sqrt(4000)


def test_uniforms_open_interval_and_shape():
    u = uniforms(1, 0, np.arange(50), np.arange(40), 0, width=3)
    assert u.shape == (50, 40, 3)
    assert (u > 0).all() and (u < 1).all()


def test_paths_start_at_zero_and_accumulate():
    g = make_grid(1.0, 5)
    b = sample_brownian(0, 0, 3, 2, g)
    p = b.paths()
    assert p.shape == (3, 6, 2)
    np.testing.assert_array_equal(p[:, 0], 0.0)
    np.testing.assert_allclose(np.diff(p, axis=1), b.increments, atol=1e-15)


def test_binary_and_csv_round_trip(tmp_path):
    g = make_grid(1.0, 3)
    b = sample_brownian(4, 1, 2, 2, g)
    b.write_binary(tmp_path / "b.bin")
    back = BrownianBundle.from_bytes((tmp_path / "b.bin").read_bytes(), g, 2, 2)
    np.testing.assert_array_equal(back, b.increments)
    b.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "particle,step,dW1,dW2"
    assert len(lines) == 1 + 2 * 3
    vals = [float(v) for v in lines[1].split(",")[2:]]
    assert vals == b.increments[0, 0].tolist()


@pytest.mark.parametrize("n,d", [(0, 1), (2, 0), (1.5, 1)])
def test_sample_rejects_bad_sizes(n, d):
    with pytest.raises(ValidationError):
        sample_brownian(0, 0, n, d, make_grid(1.0, 2))


def test_seed_range():
    with pytest.raises(ValidationError):
        sample_brownian(-1, 0, 1, 1, make_grid(1.0, 2))
    with pytest.raises(ValidationError):
        sample_brownian(2**64, 0, 1, 1, make_grid(1.0, 2))
