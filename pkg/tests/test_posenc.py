import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_allclose

from collapse_lab.errors import CausalityError, ContractError
from collapse_lab.posenc import DEFAULT_ALIBI_SLOPE, PEKind, PEScheme, decay_profile, parse_scheme, score

D = 8
vec = hnp.arrays(np.float64, D, elements=st.floats(-3, 3))
pos = st.integers(0, 10_000)


def rot_reference(x, m, theta=10000.0):
    """Block-diagonal 2x2 rotation matrix applied explicitly."""
    R = np.zeros((D, D))
    for t in range(D // 2):
        a = m * theta ** (-2 * t / D)
        R[2 * t:2 * t + 2, 2 * t:2 * t + 2] = [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
    return R @ x


class TestScore:
    @given(vec, vec, pos, st.integers(0, 100))
    def test_nope(self, q, k, i, back):
        j = max(i - back, 0)
        assert_allclose(score(q, k, i, j, parse_scheme("nope", D)), q @ k / np.sqrt(D))

    @given(vec, vec, pos)
    def test_rope_same_position_cancels(self, q, k, i):
        assert_allclose(score(q, k, i, i, parse_scheme("rope", D)), q @ k / np.sqrt(D), atol=1e-12)

    @given(vec, vec, pos, st.integers(0, 100))
    def test_rope_matches_rotation_matrices(self, q, k, i, back):
        j = max(i - back, 0)
        expected = rot_reference(q, i) @ rot_reference(k, j) / np.sqrt(D)
        assert_allclose(score(q, k, i, j, parse_scheme("rope", D)), expected, rtol=1e-9, atol=1e-9)

    @given(vec, vec, pos, st.integers(0, 100), st.integers(0, 100))
    def test_rope_depends_on_offset_only(self, q, k, i, back, shift):
        j = max(i - back, 0)
        s = parse_scheme("rope", D)
        assert_allclose(score(q, k, i, j, s), score(q, k, i + shift, j + shift, s), atol=1e-8)

    def test_alibi_example(self):
        s = PEScheme(PEKind.ALIBI, D, slope=0.5)
        assert score(np.zeros(D), np.ones(D), 5, 2, s) == -1.5

    def test_sinusoidal_adds_table(self):
        s = parse_scheme("ape", D)
        q, k = np.ones(D), np.arange(D, dtype=float)
        si, sj = s.sinusoids(7), s.sinusoids(3)
        assert_allclose(score(q, k, 7, 3, s), (q + si) @ (k + sj) / np.sqrt(D))

    def test_causality(self):
        with pytest.raises(CausalityError):
            score(np.ones(D), np.ones(D), 2, 3, parse_scheme("nope", D))

    def test_shape_checked(self):
        with pytest.raises(ContractError):
            score(np.ones(D + 2), np.ones(D), 1, 0, parse_scheme("nope", D))


class TestScheme:
    def test_sinusoids_bounded(self):
        table = parse_scheme("ape", 64).sinusoids(np.arange(0, 10**6 + 1, 997))
        assert np.all(np.abs(table) <= 1.0)

    def test_frequencies(self):
        s = parse_scheme("rope", D, theta=100.0)
        assert_allclose(s.frequencies, 100.0 ** (-2 * np.arange(D // 2) / D))

    def test_rotation_preserves_norm_and_inverts(self):
        s = parse_scheme("rope", D)
        x = np.random.default_rng(0).standard_normal((5, D))
        p = np.arange(5) * 1000
        r = s.rotate(x, p)
        assert_allclose(np.linalg.norm(r, axis=1), np.linalg.norm(x, axis=1))
        assert_allclose(s.rotate(r, p, inverse=True), x, atol=1e-12)

    def test_default_slope(self):
        assert parse_scheme("alibi", D).slope == DEFAULT_ALIBI_SLOPE == 2.0**-8

    def test_embed_variant(self):
        s = parse_scheme("ape-embed", D)
        assert s.tag == "ape-embed" and not s.in_score
        x = np.ones((2, D))
        assert_allclose(s.transform(x, np.arange(2)), x)

    @pytest.mark.parametrize("kw", [dict(dim=7), dict(base_theta=1.0), dict(slope=0.0), dict(placement="x")])
    def test_validation(self, kw):
        with pytest.raises(ContractError):
            PEScheme(**kw)

    def test_unknown_name(self):
        with pytest.raises(ContractError, match="rope"):
            parse_scheme("xpos")


class TestDecayProfile:
    def test_nope_is_zero(self):
        q, k = np.ones(D), np.arange(D, dtype=float)
        assert np.all(decay_profile(parse_scheme("nope", D), q, k, 20) == 0.0)

    def test_alibi_is_linear(self):
        s = PEScheme(PEKind.ALIBI, D, slope=0.25)
        q, k = np.ones(D), np.ones(D)
        assert_allclose(decay_profile(s, q, k, 30), 0.25 * np.arange(31))

    def test_rope_monte_carlo_shape(self):
        g = np.random.default_rng(0)
        prof = decay_profile(parse_scheme("rope", D), g.standard_normal((1000, D)), g.standard_normal((1000, D)), 64)
        assert prof.shape == (65,)
        assert prof[0] < 1e-12 and np.all(np.isfinite(prof))
