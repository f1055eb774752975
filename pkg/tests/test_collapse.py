import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose

from collapse_lab import collapse
from collapse_lab.errors import ContractError
from collapse_lab.model import ModelConfig
from collapse_lab.numerics import BFLOAT16, BINARY64, softmax
from collapse_lab.posenc import parse_scheme
from collapse_lab.tokens import PROMPT

bounded = st.floats(-10, 10)


class TestTailGap:
    @given(hnp.arrays(np.float64, st.integers(1, 50), elements=bounded), bounded, bounded)
    def test_positive_and_matches_difference(self, a, b, c):
        s_n, s_star, gap = collapse.softmax_tail_gap(a, b, c)
        assert gap > 0
        assert s_star < s_n
        assert_allclose(gap, s_n - s_star, atol=1e-12)

    def test_small_case_against_exact_rationals(self):
        # with every logit 0 the masses are 1/(k+1) and 1/(k+2)
        for k in (1, 5, 40):
            _, _, gap = collapse.softmax_tail_gap(np.zeros(k), 0.0, 0.0)
            assert_allclose(gap, float(Fraction(1, k + 1) - Fraction(1, k + 2)), rtol=1e-14)

    def test_bounds_enforced(self):
        with pytest.raises(ContractError):
            collapse.softmax_tail_gap([0.0], 11.0, 0.0)
        with pytest.raises(ContractError):
            collapse.softmax_tail_gap([np.inf], 0.0, 0.0)


class TestTotalVariation:
    def test_alternating_constant(self):
        for n in (2, 4, 10, 1000):
            assert_allclose(collapse.alternating_tv(n), 2 * (math.e - 1) / (math.e + 1), atol=1e-12)

    @pytest.mark.parametrize("n", [0, 3, 7])
    def test_alternating_rejects_odd(self, n):
        with pytest.raises(ContractError):
            collapse.alternating_tv(n)

    def test_below_oracle_bound(self):
        recs = collapse.tv_decay_experiment([300, 3000], k=200, noise=0.1, seeds=range(3))
        for r in recs:
            assert 0 < r.tv <= collapse.tv_oracle_bound(r.n, 200, 0.1)

    def test_oracle_bound_is_tight_for_worst_case(self):
        # x = 1 on the perturbed prefix, 0 elsewhere, full noise: measured TV below the ceiling
        n, k, noise = 1000, 200, 0.1
        x = np.zeros(n)
        x[:k] = 1.0
        xs = x.copy()
        xs[:k] += noise
        tv = np.abs(softmax(x) - softmax(xs)).sum()
        assert tv <= collapse.tv_oracle_bound(n, k, noise)
        assert tv > 0.25 * collapse.tv_oracle_bound(n, k, noise)

    def test_no_noise_no_distance(self):
        assert all(r.tv == 0.0 for r in collapse.tv_decay_experiment([300], noise=0.0, seeds=[0]))

    def test_k_must_be_shorter(self):
        with pytest.raises(ContractError):
            collapse.tv_decay_experiment([100], k=200)


class TestPairs:
    def test_repeated_pair(self):
        base = np.arange(6.0).reshape(3, 2)
        pair = collapse.build_repeated_pair(base)
        assert pair.extended.shape == (4, 2)
        assert np.array_equal(pair.extended[-1], base[-1])

    def test_pair_validation(self):
        with pytest.raises(ContractError):
            collapse.SequencePair(np.zeros((2, 2)), np.ones((3, 2)))
        with pytest.raises(ContractError):
            collapse.build_repeated_pair(np.zeros((0, 2)))


class TestCollapseCurves:
    def test_distance_shrinks_with_length(self):
        cfg = ModelConfig(d=16, pe=parse_scheme("nope", 16))
        recs = collapse.collapse_curve(cfg, [16, 1024], seeds=[0, 1])
        for s in (0, 1):
            d = {r.n: r.l1 for r in recs if r.seed == s}
            assert d[1024] < d[16]

    def test_record_fields(self):
        cfg = ModelConfig(d=8)
        recs = collapse.collapse_curve(cfg, [8, 4, 8], seeds=[2], preset="digits")
        assert [r.n for r in recs] == [4, 8]
        assert all(r.length == r.n + len(PROMPT) and r.precision == "f64" and r.linf <= r.l1 for r in recs)

    def test_state_measure(self):
        cfg = ModelConfig(d=8)
        recs = collapse.collapse_curve(cfg, [8], seeds=[0], measure="state")
        assert recs[0].l1 > 0
        with pytest.raises(ContractError):
            collapse.collapse_curve(cfg, [8], seeds=[0], measure="bogus")

    def test_comma_tokens(self):
        t = collapse.comma_tokens(9, 8, period=3)
        assert t.shape == (len(PROMPT) + 12, 8)
        sep = np.full(8, 0.5)
        t2 = collapse.comma_tokens(9, 8, period=3, separator=sep)
        assert np.sum(np.all(t2 == sep, axis=1)) == 3

    def test_separator_experiment_keeps_distance(self):
        cfg = ModelConfig(d=32)
        res = collapse.separator_experiment(cfg, [1024], seeds=[0])
        assert res["commas"][0].l1 > res["ones"][0].l1
        with pytest.raises(ContractError):
            collapse.separator_experiment(cfg, [16], period=1)


class TestThreshold:
    def test_bfloat16_detects(self):
        th = collapse.precision_threshold(ModelConfig(d=32), [2**k for k in range(2, 14)], BFLOAT16, [0])
        assert th[0].detected and th[0].n <= 8192
        assert th[0].distances[-1] == (th[0].n, 0.0)

    def test_binary64_short_scan_not_detected(self):
        th = collapse.precision_threshold(ModelConfig(d=32), [4, 8, 16, 32], BINARY64, [0])
        assert not th[0].detected
        assert len(th[0].distances) == 4
