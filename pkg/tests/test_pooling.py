"""Operator contracts: dropout, subsampling, average pooling, SAP, Zeiler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochpool import (
    EmptySubsampleError,
    InvalidInputError,
    InvalidPoolingError,
    InvalidProbabilityError,
    InvalidShapeError,
    Phase,
    RngStream,
    avg_pool_1d,
    avg_pool_2d,
    dropout,
    dropout_mask,
    global_avg_pool,
    sample_gaussian,
    sap_backward,
    sap_forward,
    second_moment,
    stochastic_subsample,
    zeiler_stochastic_pool,
)


class TestDropout:
    def test_train_arithmetic_matches_mask(self):
        # out = x * m / p for the mask the stream actually yields
        x = np.array([1.0, 2.0, -3.0, 4.0])
        rng = RngStream(0, 5)
        out = dropout(x, 0.5, Phase.TRAIN, rng)
        m = dropout_mask(x.shape, 0.5, rng)
        assert np.array_equal(out, x * m / 0.5)
        assert set(np.unique(out[~m])) <= {0.0}

    def test_test_phase_identity(self):
        x = np.array([1.0, 2.0])
        assert dropout(x, 0.5, Phase.TEST) is x

    def test_invalid_probability(self):
        for p in (0.0, 1.2, -0.5):
            with pytest.raises(InvalidProbabilityError):
                dropout(np.ones(4), p, Phase.TRAIN, RngStream(0))

    def test_train_needs_rng(self):
        with pytest.raises(InvalidInputError):
            dropout(np.ones(4), 0.5, Phase.TRAIN)

    def test_second_moment_inflation(self):
        x = sample_gaussian((16, 16, 64, 64), RngStream(1))
        out = dropout(x, 0.5, Phase.TRAIN, RngStream(2))
        ratio = second_moment(out) / second_moment(x)
        assert abs(ratio - 2.0) < 0.02

    def test_mean_preserved(self):
        x = sample_gaussian((16, 16, 64, 64), RngStream(3))
        out = dropout(x, 0.5, Phase.TRAIN, RngStream(4))
        # mean difference has sd sqrt(E[x^2] (1-p)/p / n)
        se = np.sqrt(second_moment(x) / x.size)
        assert abs(out.mean() - x.mean()) < 4 * se


class TestStochasticSubsample:
    def test_vector_values_are_subset(self):
        x = np.array([5.0, 6.0, 7.0, 8.0])
        out = stochastic_subsample(x, 0.5, Phase.TRAIN, RngStream(0))
        assert out.shape == (2,)
        assert set(out.tolist()) <= {5.0, 6.0, 7.0, 8.0}
        assert len(set(out.tolist())) == 2

    def test_test_phase_identity(self):
        x = np.arange(8.0)
        assert stochastic_subsample(x, 0.5, Phase.TEST) is x

    def test_exact_output_length(self):
        x = np.zeros((2, 3, 10))
        out = stochastic_subsample(x, 0.37, Phase.TRAIN, RngStream(1))
        assert out.shape == (2, 3, 3)

    def test_channel_shared_masks(self):
        x = np.arange(2 * 3 * 8, dtype=np.float64).reshape(2, 3, 8)
        out = stochastic_subsample(x, 0.5, Phase.TRAIN, RngStream(2))
        # shared mask: channel rows keep aligned columns (offsets of 8)
        base = out[0, 0] % 8
        for c in range(3):
            assert np.array_equal(out[0, c] % 8, base)

    def test_channel_independent_masks(self):
        x = np.tile(np.arange(64.0), (1, 4, 1))
        out = stochastic_subsample(
            x, 0.25, Phase.TRAIN, RngStream(3), channel_mode="independent"
        )
        assert out.shape == (1, 4, 16)
        assert not all(np.array_equal(out[0, 0], out[0, c]) for c in range(1, 4))

    def test_four_d_input_flattened(self):
        x = sample_gaussian((2, 3, 4, 4), RngStream(4))
        out = stochastic_subsample(x, 0.5, Phase.TRAIN, RngStream(5))
        assert out.shape == (2, 3, 8)

    def test_mean_variance_consistency(self):
        x = sample_gaussian((1, 1, 256, 256), RngStream(6))
        out = stochastic_subsample(x, 0.5, Phase.TRAIN, RngStream(7))
        assert abs(out.mean() - x.mean()) < 0.02
        assert abs(out.var() - x.var()) < 0.03

    def test_empty_subsample(self):
        with pytest.raises(EmptySubsampleError):
            stochastic_subsample(np.ones(4), 0.2, Phase.TRAIN, RngStream(0))


class TestAveragePooling:
    def test_avg_pool_1d_example(self):
        assert np.array_equal(avg_pool_1d(np.array([1.0, 3.0, 2.0, 4.0]), 2), [2.0, 3.0])

    def test_avg_pool_1d_non_divisible(self):
        with pytest.raises(InvalidPoolingError):
            avg_pool_1d(np.ones(5), 2)

    def test_avg_pool_1d_second_moment_decay(self):
        # pooling r i.i.d. N(0,1) values decays the second moment by 1/r
        x = sample_gaussian((1, 1, 256, 256), RngStream(8)).ravel()
        out = avg_pool_1d(x, 16)
        assert abs(second_moment(out) * 16 - 1.0) < 0.1

    def test_avg_pool_2d_window(self):
        x = np.array([[1.0, 3.0], [2.0, 4.0]]).reshape(1, 1, 2, 2)
        assert avg_pool_2d(x, 2)[0, 0, 0, 0] == 2.5

    def test_avg_pool_2d_second_moment_decay(self):
        x = sample_gaussian((8, 8, 64, 64), RngStream(9))
        out = avg_pool_2d(x, 8)
        assert abs(second_moment(out) * 64 - 1.0) < 0.1

    def test_global_avg_pool_constant(self):
        x = np.full((3, 2, 4, 4), 7.5)
        assert np.array_equal(global_avg_pool(x), np.full((3, 2), 7.5))

    def test_global_avg_pool_example(self):
        x = np.array([[1.0, 3.0], [2.0, 4.0]]).reshape(1, 1, 2, 2)
        assert global_avg_pool(x)[0, 0] == 2.5

    def test_global_avg_pool_second_moment(self):
        x = sample_gaussian((64, 256, 32, 32), RngStream(10))
        sm = second_moment(global_avg_pool(x))
        assert abs(sm / (1.0 / 1024.0) - 1.0) < 0.05

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4))
    def test_pool_size_one_is_identity(self, n, c):
        x = sample_gaussian((n, c, 4, 4), RngStream(n * 7 + c))
        assert np.array_equal(avg_pool_1d(x.reshape(n, c, 16), 1), x.reshape(n, c, 16))
        assert np.array_equal(avg_pool_2d(x, 1), x)


class TestSapForward:
    def test_degenerate_keep_equals_average_pooling(self):
        x = sample_gaussian((2, 3, 8, 8), RngStream(11))
        for r in (None, 2, 4):
            train, _ = sap_forward(x, r, 1.0, Phase.TRAIN, RngStream(12))
            test, _ = sap_forward(x, r, 1.0, Phase.TEST)
            ref = global_avg_pool(x) if r is None else avg_pool_2d(x, r)
            assert np.array_equal(train, ref)
            assert np.array_equal(test, ref)

    def test_global_test_example(self):
        x = np.array([[1.0, 3.0], [2.0, 4.0]]).reshape(1, 1, 2, 2)
        out, _ = sap_forward(x, None, 0.5, Phase.TEST)
        assert out[0, 0] == 2.5

    @pytest.mark.parametrize("r", [None, 2, 4])
    @pytest.mark.parametrize("mode", ["window", "sequence"])
    def test_shape_invariance_across_phases(self, r, mode):
        x = sample_gaussian((3, 5, 8, 8), RngStream(13))
        train, _ = sap_forward(x, r, 0.5, Phase.TRAIN, RngStream(14), mode=mode)
        test, _ = sap_forward(x, r, 0.5, Phase.TEST, mode=mode)
        assert train.shape == test.shape

    def test_second_moment_consistency_global(self):
        x = sample_gaussian((64, 256, 64, 64), RngStream(15))
        train, _ = sap_forward(x, None, 0.5, Phase.TRAIN, RngStream(16))
        test, _ = sap_forward(x, None, 0.5, Phase.TEST)
        ratio = second_moment(train) / second_moment(test)
        assert abs(ratio - 1.0) < 0.05
        # omitting the sqrt(p) scaling inflates the ratio to 1/p
        unscaled_ratio = ratio / 0.5
        assert abs(unscaled_ratio - 2.0) < 0.2

    def test_train_matches_manual_pipeline(self):
        # oracle: replay the mask and average the kept elements by hand
        x = sample_gaussian((2, 3, 4, 4), RngStream(17))
        rng = RngStream(18)
        out, state = sap_forward(x, None, 0.5, Phase.TRAIN, rng)
        x2 = x.reshape(2, 3, 16)
        for i in range(2):
            kept = np.argsort(rng.substream(i).generator().random(16))[:8]
            manual = np.sqrt(0.5) * x2[i][:, kept].mean(axis=1)
            assert np.allclose(out[i], manual, rtol=1e-12, atol=0)
            assert np.array_equal(np.flatnonzero(state.kept_mask[i]), np.sort(kept))

    def test_determinism(self):
        x = sample_gaussian((2, 3, 8, 8), RngStream(19))
        a, _ = sap_forward(x, 4, 0.5, Phase.TRAIN, RngStream(20))
        b, _ = sap_forward(x, 4, 0.5, Phase.TRAIN, RngStream(20))
        assert np.array_equal(a, b)

    def test_test_phase_repeatable_without_rng(self):
        x = sample_gaussian((2, 3, 8, 8), RngStream(21))
        a, _ = sap_forward(x, 2, 0.5, Phase.TEST)
        b, _ = sap_forward(x, 2, 0.5, Phase.TEST)
        assert np.array_equal(a, b)

    def test_train_needs_rng(self):
        x = np.ones((1, 1, 4, 4))
        with pytest.raises(InvalidInputError):
            sap_forward(x, None, 0.5, Phase.TRAIN)

    def test_sequence_mode_needs_integral_window(self):
        x = np.ones((1, 1, 6, 6))
        with pytest.raises(InvalidPoolingError):
            # k = int(36 * 0.4) = 14 does not split into 9 windows
            sap_forward(x, 2, 0.4, Phase.TRAIN, RngStream(0), mode="sequence")

    def test_windowed_never_nan_with_sparse_keep(self):
        # keep so few cells that some windows lose everything
        for t in range(50):
            x = sample_gaussian((1, 2, 4, 4), RngStream(22).substream(t))
            out, state = sap_forward(x, 2, 0.25, Phase.TRAIN, RngStream(23).substream(t))
            assert np.isfinite(out).all()
        assert state.out_shape == (1, 2, 2, 2)


def _fd_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = fn(x)
        x[idx] = orig - eps
        lo = fn(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def _max_rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class TestSapBackward:
    @pytest.mark.parametrize(
        "r,mode,p",
        [
            (None, "window", 0.5),
            (None, "window", 1.0),
            (4, "window", 0.5),
            (4, "sequence", 0.5),
            (2, "window", 1.0),
        ],
    )
    def test_gradient_matches_finite_differences(self, r, mode, p):
        x = sample_gaussian((2, 2, 8, 8), RngStream(24))
        mask_rng = RngStream(25)  # fixed mask: same stream on every evaluation
        w_rng = RngStream(26)
        _, state = sap_forward(x, r, p, Phase.TRAIN, mask_rng, mode=mode)
        w = sample_gaussian((1, 1, 1, 1), w_rng).ravel()[0] * np.ones(state.out_shape)

        def loss(xv):
            out, _ = sap_forward(xv, r, p, Phase.TRAIN, mask_rng, mode=mode)
            return float((out * w).sum())

        analytic = sap_backward(w, state)
        numeric = _fd_grad(loss, x.copy())
        assert _max_rel_err(analytic, numeric) < 1e-6

    def test_fallback_window_gradient(self):
        # find a realization with an empty window, then check its gradient
        for t in range(500):
            x = sample_gaussian((1, 2, 4, 4), RngStream(27).substream(t))
            rng = RngStream(28).substream(t)
            out, state = sap_forward(x, 2, 0.25, Phase.TRAIN, rng)
            if state.n_fallback_windows:
                break
        else:
            pytest.fail("no fallback realization found")
        w = np.ones(state.out_shape)

        def loss(xv):
            o, _ = sap_forward(xv, 2, 0.25, Phase.TRAIN, rng)
            return float((o * w).sum())

        analytic = sap_backward(w, state)
        numeric = _fd_grad(loss, x.copy())
        assert _max_rel_err(analytic, numeric) < 1e-6
        # fallback windows spread 1/r^2 to all four cells
        fb = np.argwhere(state.fallback[0])
        wy, wx = fb[0]
        assert np.allclose(analytic[0, :, 2 * wy : 2 * wy + 2, 2 * wx : 2 * wx + 2], 0.25)

    def test_dropped_elements_get_zero_gradient(self):
        x = sample_gaussian((1, 2, 4, 4), RngStream(29))
        _, state = sap_forward(x, None, 0.5, Phase.TRAIN, RngStream(30))
        grad = sap_backward(np.ones(state.out_shape), state)
        dropped = ~state.kept_mask[0]
        assert np.all(grad.reshape(1, 2, 16)[:, :, dropped] == 0.0)

    def test_degenerate_keep_gradient_is_uniform(self):
        x = sample_gaussian((1, 1, 4, 4), RngStream(31))
        _, state = sap_forward(x, 2, 1.0, Phase.TRAIN, RngStream(32))
        grad = sap_backward(np.ones(state.out_shape), state)
        assert np.allclose(grad, 0.25)

    def test_shape_mismatch_rejected(self):
        x = sample_gaussian((1, 1, 4, 4), RngStream(33))
        _, state = sap_forward(x, None, 0.5, Phase.TRAIN, RngStream(34))
        with pytest.raises(InvalidShapeError):
            sap_backward(np.ones((2, 2)), state)


class TestZeilerPooling:
    def test_test_phase_weighted_average(self):
        x = np.array([[1.0, 3.0], [1.0, 3.0]]).reshape(1, 1, 2, 2)
        out = zeiler_stochastic_pool(x, 2, Phase.TEST)
        assert out[0, 0, 0, 0] == pytest.approx(2.5)

    def test_all_zero_window(self):
        x = np.zeros((1, 1, 2, 2))
        assert zeiler_stochastic_pool(x, 2, Phase.TEST)[0, 0, 0, 0] == 0.0
        out = zeiler_stochastic_pool(x, 2, Phase.TRAIN, RngStream(0))
        assert out[0, 0, 0, 0] == 0.0

    def test_train_sampling_frequencies(self):
        # identical windows [1, 3, 1, 3]: P(pick 3) = 6/8 = 0.75
        reps = 50_000
        x = np.tile(np.array([[1.0, 3.0], [1.0, 3.0]]), (1, 1, 1, reps))
        out = zeiler_stochastic_pool(x, 2, Phase.TRAIN, RngStream(1))
        freq = (out == 3.0).mean()
        assert abs(freq - 0.75) < 0.01

    def test_negative_input_rejected(self):
        with pytest.raises(InvalidInputError):
            zeiler_stochastic_pool(-np.ones((1, 1, 2, 2)), 2, Phase.TEST)

    def test_train_picks_window_members(self):
        x = np.abs(sample_gaussian((2, 3, 4, 4), RngStream(2)))
        out = zeiler_stochastic_pool(x, 2, Phase.TRAIN, RngStream(3))
        wins = x.reshape(2, 3, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(2, 3, 2, 2, 4)
        assert np.all(np.any(wins == out[..., None], axis=-1))

    def test_determinism(self):
        x = np.abs(sample_gaussian((2, 3, 4, 4), RngStream(4)))
        a = zeiler_stochastic_pool(x, 2, Phase.TRAIN, RngStream(5))
        b = zeiler_stochastic_pool(x, 2, Phase.TRAIN, RngStream(5))
        assert np.array_equal(a, b)
