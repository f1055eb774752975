import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose, assert_array_equal

from collapse_lab.errors import ContractError, NumericalFailure
from collapse_lab.numerics import (
    BFLOAT16, BINARY16, BINARY32, BINARY64, FloatFormat, FormatTag, l1_dist, linf_dist,
    parse_format_tag, rms_norm, rms_norm_backward, round_to_format, softmax, spectral_norm,
    total_variation,
)

finite = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)
vectors = hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50))


def bf16_reference(x):
    """Round-to-nearest-even on the float32 bit pattern, dropping 16 low bits."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16) << 16
    return rounded.astype(np.uint32).view(np.float32).astype(np.float64)


class TestSoftmax:
    def test_uniform(self):
        assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))

    def test_large_logits_do_not_overflow(self):
        p = softmax([1000.0, 1000.0])
        assert_allclose(p, [0.5, 0.5])

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ContractError):
            softmax([])
        with pytest.raises(ContractError):
            softmax([0.0, np.nan])

    @given(vectors)
    def test_is_distribution(self, x):
        p = softmax(x)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12

    @given(vectors, st.floats(-100, 100))
    def test_shift_invariance(self, x, c):
        assert_allclose(softmax(x + c), softmax(x), rtol=1e-9, atol=1e-15)

    @given(vectors)
    def test_matches_naive_formula(self, x):
        e = np.exp(x)
        assert_allclose(softmax(x), e / e.sum(), rtol=1e-12, atol=1e-300)


class TestDistances:
    def test_total_variation_range(self):
        assert total_variation([1.0, 0.0], [0.0, 1.0]) == 2.0
        assert total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_total_variation_rejects_non_distribution(self):
        with pytest.raises(ContractError):
            total_variation([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(ContractError):
            total_variation([1.0, 0.0], [1.0, 0.0, 0.0])

    @given(vectors)
    def test_total_variation_symmetric_and_bounded(self, x):
        p, q = softmax(x), softmax(x[::-1])
        tv = total_variation(p, q)
        assert tv == total_variation(q, p)
        assert 0.0 <= tv <= 2.0

    def test_l1_and_linf(self):
        assert l1_dist([1, 2, 3], [1, 0, 0]) == 5.0
        assert linf_dist([1, 2, 3], [1, 0, 0]) == 3.0
        with pytest.raises(ContractError):
            l1_dist([1.0], [1.0, 2.0])


class TestRmsNorm:
    def test_unit_rms(self):
        x = np.array([3.0, 4.0])
        y = rms_norm(x)
        assert_allclose(np.sqrt(np.mean(y**2)), 1.0, rtol=1e-6)

    def test_scale(self):
        x = np.arange(1.0, 5.0)
        assert_allclose(rms_norm(x, 2.0), 2.0 * rms_norm(x))
        with pytest.raises(ContractError):
            rms_norm(x, 0.0)

    def test_zero_vector_is_finite(self):
        assert_array_equal(rms_norm(np.zeros(3)), np.zeros(3))

    @given(hnp.arrays(np.float64, 6, elements=st.floats(-5, 5)), hnp.arrays(np.float64, 6, elements=st.floats(-1, 1)))
    def test_backward_matches_finite_differences(self, x, g):
        h = 1e-6
        fd = np.array([
            (g @ rms_norm(x + h * e, 1.5) - g @ rms_norm(x - h * e, 1.5)) / (2 * h) for e in np.eye(6)
        ])
        assert_allclose(rms_norm_backward(x, g, 1.5), fd, rtol=1e-4, atol=1e-5)


class TestSpectralNorm:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_matches_svd(self, m, n, seed):
        w = np.random.default_rng(seed).standard_normal((m, n))
        assert_allclose(spectral_norm(w), np.linalg.svd(w, compute_uv=False)[0], rtol=1e-6)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_never_overestimates(self, seed):
        w = np.random.default_rng(seed).standard_normal((40, 16))
        assert spectral_norm(w, max_iter=20) <= np.linalg.norm(w, 2) * (1 + 1e-12)


class TestFloatFormat:
    @pytest.mark.parametrize(
        "tag,layout", [(FormatTag.BINARY64, (52, 11)), (FormatTag.BINARY32, (23, 8)),
                       (FormatTag.BFLOAT16, (7, 8)), (FormatTag.BINARY16, (10, 5))],
    )
    def test_layouts(self, tag, layout):
        f = FloatFormat.of(tag)
        assert (f.mantissa_bits, f.exponent_bits) == layout

    def test_mismatched_layout_rejected(self):
        with pytest.raises(ContractError):
            FloatFormat(FormatTag.BFLOAT16, 10, 5)

    def test_known_limits(self):
        assert BINARY16.max_finite == 65504.0
        assert BINARY32.max_finite == float(np.finfo(np.float32).max)
        assert BFLOAT16.epsilon == 2.0**-7
        assert BINARY64.max_finite == float(np.finfo(np.float64).max)

    def test_aliases(self):
        assert parse_format_tag("fp32") is FormatTag.BINARY32
        assert parse_format_tag("BF16") is FormatTag.BFLOAT16
        with pytest.raises(ContractError):
            parse_format_tag("fp8")


class TestRounding:
    @given(finite)
    def test_binary32_matches_hardware_cast(self, x):
        with np.errstate(over="ignore"):
            expected = float(np.float32(x))
        assert round_to_format(x, BINARY32) == expected

    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_binary16_matches_numpy_half(self, x):
        with np.errstate(over="ignore"):
            expected = float(np.float16(x))
        assert round_to_format(x, BINARY16) == expected

    @given(st.floats(width=32, allow_nan=False, allow_infinity=False))
    def test_bfloat16_matches_bit_reference(self, x):
        # float32 inputs make the bit-level reference a single rounding
        assert round_to_format(x, BFLOAT16) == bf16_reference(x)

    def test_ties_to_even(self):
        one = 1.0
        half_ulp = BFLOAT16.epsilon / 2
        assert round_to_format(one + half_ulp, BFLOAT16) == 1.0
        assert round_to_format(one + 3 * half_ulp, BFLOAT16) == 1.0 + 2 * half_ulp * 2

    def test_subnormals(self):
        tiny = 2.0**-24  # smallest binary16 subnormal
        assert round_to_format(tiny, BINARY16) == tiny
        assert round_to_format(tiny * 0.49, BINARY16) == 0.0
        assert round_to_format(tiny * 0.51, BINARY16) == tiny

    def test_overflow(self):
        assert math.isinf(round_to_format(70000.0, BINARY16))
        assert round_to_format(65519.0, BINARY16) == 65504.0
        with pytest.raises(NumericalFailure):
            round_to_format(np.array([1.0, 1e6]), BINARY16, strict=True)

    def test_binary64_is_identity(self):
        x = np.random.default_rng(0).standard_normal(10)
        assert_array_equal(round_to_format(x, BINARY64), x)

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            round_to_format([np.inf], BFLOAT16)

    @given(hnp.arrays(np.float64, 8, elements=st.floats(-1e4, 1e4)))
    def test_idempotent(self, x):
        for fmt in (BFLOAT16, BINARY16, BINARY32):
            r = round_to_format(x, fmt)
            assert_array_equal(round_to_format(r, fmt), r)
