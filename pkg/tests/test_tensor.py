"""Moment estimators and gaussian tensor sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochpool import (
    DegenerateInputError,
    InvalidShapeError,
    RngStream,
    mean,
    sample_gaussian,
    second_moment,
    variance,
)


class TestSampleGaussian:
    def test_single_entry_finite(self):
        x = sample_gaussian((1, 1, 1, 1), RngStream(0))
        assert x.shape == (1, 1, 1, 1)
        assert np.isfinite(x).all()

    def test_large_sample_mean_clt_bound(self):
        x = sample_gaussian((64, 256, 16, 16), RngStream(1))
        assert abs(x.mean()) < 4.0 / np.sqrt(x.size)

    def test_same_seed_identical(self):
        a = sample_gaussian((3, 2, 5, 7), RngStream(5, 3))
        b = sample_gaussian((3, 2, 5, 7), RngStream(5, 3))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("shape", [(0, 1, 1, 1), (1, 1, -2, 1), (2, 2), (1, 1, 1, 1, 1)])
    def test_invalid_shapes(self, shape):
        with pytest.raises(InvalidShapeError):
            sample_gaussian(shape, RngStream(0))


class TestMoments:
    def test_mean_constant(self):
        assert mean(np.ones((2, 2, 2, 2))) == 1.0

    def test_mean_two_values(self):
        assert mean(np.array([1.0, 3.0])) == 2.0

    def test_mean_million_gaussians(self):
        # CLT: sd of the mean is 1/sqrt(n); assert a 4-sigma bound
        x = sample_gaussian((1, 1, 1000, 1000), RngStream(2))
        assert abs(mean(x)) < 0.004

    def test_second_moment_constant(self):
        assert second_moment(np.ones((2, 2, 2, 2))) == 1.0

    def test_second_moment_two_values(self):
        assert second_moment(np.array([1.0, 3.0])) == 5.0

    def test_second_moment_million_gaussians(self):
        # Var(x^2) = 2 for N(0,1): sd of the estimate is sqrt(2/n)
        x = sample_gaussian((1, 1, 1000, 1000), RngStream(3))
        assert abs(second_moment(x) - 1.0) < 0.01

    def test_variance_constant(self):
        assert variance(np.ones((2, 2, 2, 2))) == 0.0

    def test_variance_two_values(self):
        assert variance(np.array([1.0, 3.0])) == 1.0

    def test_variance_million_gaussians(self):
        x = sample_gaussian((1, 1, 1000, 1000), RngStream(4))
        assert abs(variance(x) - 1.0) < 0.01

    def test_variance_needs_two_entries(self):
        with pytest.raises(DegenerateInputError):
            variance(np.array([3.0]))

    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            mean(np.array([]))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=64
    )
)
def test_variance_identity_property(values):
    t = np.array(values)
    assert variance(t) == second_moment(t) - mean(t) ** 2


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=-1000, max_value=1000), st.integers(2, 50))
def test_constant_tensor_moments_exact(c, n):
    # integer constants: n*c and n*c^2 are exact, so the estimators are too
    t = np.full(n, float(c))
    assert mean(t) == c
    assert second_moment(t) == float(c) * float(c)
    assert variance(t) == 0.0
