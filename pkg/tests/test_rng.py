"""Stream determinism, independence, and gaussian sampler quality."""

import numpy as np
import pytest
from scipy import stats

from stochpool import RngStream
from stochpool.rng import _sfc64_words, sample_normals


def test_same_stream_same_draws():
    a = sample_normals(4096, RngStream(1, 7))
    b = sample_normals(4096, RngStream(1, 7))
    assert np.array_equal(a, b)


def test_distinct_stream_ids_differ():
    a = sample_normals(256, RngStream(1, 7))
    b = sample_normals(256, RngStream(1, 8))
    assert not np.array_equal(a, b)


def test_substreams_are_distinct():
    root = RngStream(3)
    ids = {root.substream(i).stream_id for i in range(1000)}
    ids |= {root.substream(i).substream(j).stream_id for i in range(30) for j in range(30)}
    assert len(ids) == 1000 + 900


def test_uniform_generator_deterministic():
    g1 = RngStream(11, 2).generator().random(100)
    g2 = RngStream(11, 2).generator().random(100)
    assert np.array_equal(g1, g2)


def test_uniform_and_gaussian_sides_are_keyed_apart():
    stream = RngStream(5, 9)
    u = stream.generator().random(1000)
    z = sample_normals(1000, stream)
    # same stream object, but the two draw kinds come from different keys
    assert abs(np.corrcoef(u, stats.norm.cdf(z))[0, 1]) < 0.1


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        RngStream(-1)
    with pytest.raises(ValueError):
        RngStream(0).substream(-2)


def test_word_stream_matches_numpy_sfc64():
    # the gaussian kernel's SFC64 replica must be bit-exact against numpy's
    for seed, sid in [(0, 0), (12345, 77), (2**40, 3)]:
        stream = RngStream(seed, sid)
        state = stream.gaussian_state()
        mine = np.empty(2048, np.uint64)
        _sfc64_words(state, mine)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream.stream_id, 1))
        ref = np.random.SFC64(ss).random_raw(2048)
        assert np.array_equal(mine, ref)


@pytest.fixture(scope="module")
def draws():
    return sample_normals(4_000_000, RngStream(2024))


class TestGaussianQuality:
    def test_moments(self, draws):
        n = draws.size
        assert abs(draws.mean()) < 4.0 / np.sqrt(n)
        assert abs(draws.var() - 1.0) < 4.0 * np.sqrt(2.0 / n)
        # kurtosis excess has sd sqrt(24/n)
        assert abs(stats.kurtosis(draws)) < 4.0 * np.sqrt(24.0 / n)

    def test_kolmogorov_smirnov(self, draws):
        assert stats.kstest(draws[:500_000], "norm").pvalue > 1e-3

    def test_tail_frequencies(self, draws):
        n = draws.size
        for t in (2.0, 3.0, 4.0):
            expected = 2.0 * stats.norm.sf(t)
            observed = (np.abs(draws) > t).mean()
            se = np.sqrt(expected * (1.0 - expected) / n)
            assert abs(observed - expected) < 4.5 * se

    def test_binned_chi_square(self, draws):
        edges = np.linspace(-4.0, 4.0, 41)
        counts, _ = np.histogram(draws, edges)
        probs = np.diff(stats.norm.cdf(edges))
        inside = counts.sum()
        assert stats.chisquare(counts, probs / probs.sum() * inside).pvalue > 1e-3


def test_out_buffer_matches_fresh_allocation():
    stream = RngStream(9, 4)
    fresh = sample_normals(10_000, stream)
    buf = np.empty(10_000)
    sample_normals(10_000, stream, out=buf)
    assert np.array_equal(fresh, buf)


def test_out_buffer_validation():
    from stochpool.errors import InvalidShapeError

    with pytest.raises(InvalidShapeError):
        sample_normals(10, RngStream(0), out=np.empty(11))
    with pytest.raises(InvalidShapeError):
        sample_normals(10, RngStream(0), out=np.empty(10, np.float32))
