"""Expected alignments, remainders, constrained alignments and chunk attention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcmma import align, oracle

# alpha for p = 0.5 everywhere, L=3, T=4 (path enumeration, exact dyadic values)
ALPHA_HALF = np.array(
    [
        [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 16],
        [1 / 4, 1 / 4, 3 / 16, 1 / 8, 3 / 16],
        [1 / 8, 3 / 16, 3 / 16, 5 / 32, 11 / 32],
    ]
)
# gamma-hat of ALPHA_HALF with epsilon = 1 (direct-sum oracle, checked by hand for row 2)
GAMMA_HALF_EPS1 = np.array(
    [
        [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 16],
        [1 / 4, 1 / 2, 11 / 64, 7 / 128, 3 / 128],
        [1 / 8, 23 / 64, 17 / 64, 73 / 512, 55 / 512],
    ]
)


def random_p(seed, shape, margin=0.0):
    return np.random.default_rng(seed).uniform(margin, 1 - margin, size=shape)


@st.composite
def prob_arrays(draw, max_M=3, max_L=4, max_T=8):
    M = draw(st.integers(1, max_M))
    L = draw(st.integers(1, max_L))
    T = draw(st.integers(1, max_T))
    seed = draw(st.integers(0, 2**32 - 1))
    p = np.random.default_rng(seed).random((M, L, T))
    # mix in exact zeros and ones
    snap = np.random.default_rng(seed + 1).random((M, L, T)) < draw(st.sampled_from([0.0, 0.2, 0.6]))
    p[snap] = np.round(p[snap])
    return p


class TestExpectedAlignment:
    def test_two_frame_example(self):
        got = align.expected_alignment([[0.5, 0.5]])
        np.testing.assert_array_equal(got, [[0.5, 0.25, 0.25]])

    def test_half_matrix_matches_enumeration_values(self):
        np.testing.assert_allclose(align.expected_alignment(np.full((3, 4), 0.5)), ALPHA_HALF, atol=1e-15)

    def test_certain_selection_never_advances(self):
        got = align.expected_alignment(np.ones((3, 5)))
        expected = np.zeros((3, 6))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(got, expected)

    def test_zero_probabilities_select_nothing(self):
        got = align.expected_alignment(np.zeros((2, 4)))
        np.testing.assert_array_equal(got[:, :4], 0.0)
        np.testing.assert_array_equal(got[:, 4], 1.0)

    @pytest.mark.parametrize("method", ["direct", "scan", "cumprod"])
    def test_methods_agree(self, method):
        p = random_p(3, (4, 7), margin=1e-3)
        ref = oracle.alpha_by_enumeration(p)
        np.testing.assert_allclose(align.expected_alignment(p, method=method), ref, atol=1e-12)

    def test_scan_exact_where_cumprod_underflows(self):
        # (1 - p) = 1e-3 over 40 frames takes the running product far below the 1e-30 floor
        p = np.full((2, 40), 0.999)
        p[:, 5] = 1e-3
        np.testing.assert_allclose(
            align.expected_alignment(p, method="scan"), align.expected_alignment(p, method="direct"), atol=1e-15
        )

    def test_sub_probability_initial_row(self):
        a0 = np.array([0.2, 0.3, 0.1])
        p = random_p(5, (2, 3))
        got = align.expected_alignment(p, a0)
        np.testing.assert_allclose(got, oracle.alpha_by_enumeration(p, a0), atol=1e-12)
        # mass that never existed is reported as no-selection
        assert got[0].sum() == pytest.approx(1.0)
        assert got[0, :3].sum() <= 0.6 + 1e-12

    def test_batched_heads(self):
        p = random_p(7, (3, 2, 5))
        got = align.expected_alignment(p)
        assert got.shape == (3, 2, 6)
        for m in range(3):
            np.testing.assert_array_equal(got[m], align.expected_alignment(p[m]))

    def test_preserves_extended_precision(self):
        p = random_p(1, (2, 3)).astype(np.longdouble)
        assert align.expected_alignment(p).dtype == np.longdouble

    @pytest.mark.parametrize(
        "p, alpha0, match",
        [
            ([[0.5, 1.5]], None, r"\[0, 1\]"),
            ([[0.5, -0.1]], None, r"\[0, 1\]"),
            ([[0.5, 0.5]], [0.7, 0.7], "mass"),
            ([[0.5, 0.5]], [1.0, 0.0, 0.0], "frames"),
            ([[0.5, 0.5]], [-0.1, 0.5], "non-negative"),
        ],
    )
    def test_rejects_invalid_inputs(self, p, alpha0, match):
        with pytest.raises(ValueError, match=match):
            align.expected_alignment(p, alpha0)

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            align.expected_alignment([[0.5]], method="fft")

    def test_eq2_at_alpha_reproduces_alpha(self):
        """Re-evaluating each row from the previous row of alpha itself gives alpha back."""
        p = random_p(11, (4, 8))
        alpha = align.expected_alignment(p)
        T = p.shape[1]
        prev = np.eye(1, T)[0]
        for i in range(4):
            for j in range(T):
                total = 0.0
                for k in range(j + 1):
                    total += prev[k] * np.prod(1 - p[i, k:j])
                assert abs(p[i, j] * total - alpha[i, j]) <= 1e-12
            prev = alpha[i, :T]


class TestRemainder:
    ROW = np.array([[0.5, 0.25, 0.25]])

    def test_empty_sum_is_one(self):
        assert align.remainder_B(self.ROW, 1, 0) == 1.0
        assert align.remainder_B(self.ROW, 1, -3) == 1.0

    def test_partial_sum(self):
        assert align.remainder_B(self.ROW, 1, 2) == pytest.approx(0.25, abs=1e-15)

    def test_full_mass_leaves_nothing(self):
        assert align.remainder_B(np.array([[0.25, 0.75, 0.0]]), 1, 2) == 0.0

    def test_row_zero_convention(self):
        assert align.remainder_B(self.ROW, 0, 2) == 1.0

    def test_clamps_rounding_below_zero(self):
        row = np.array([[0.1, 0.2, 0.7 + 1e-13, 0.0]])
        assert align.remainder_B(row, 1, 3) == 0.0

    @pytest.mark.parametrize("i, j", [(1, 3), (2, 1), (-1, 1)])
    def test_out_of_range(self, i, j):
        with pytest.raises(ValueError):
            align.remainder_B(self.ROW, i, j)


class TestSelfConstrained:
    def test_half_matrix_eps1(self):
        np.testing.assert_allclose(align.self_constrained(ALPHA_HALF, 1), GAMMA_HALF_EPS1, atol=1e-15)

    def test_matches_direct_sum(self):
        alpha = align.expected_alignment(random_p(2, (4, 6)))
        for eps in range(0, 8):
            ref = oracle.constrained_by_direct_sum(alpha[None], eps, mode="self_constrained")[0]
            np.testing.assert_allclose(align.self_constrained(alpha, eps), ref, atol=1e-12)

    def test_vacuous_for_large_epsilon(self):
        alpha = align.expected_alignment(random_p(4, (3, 5)))
        np.testing.assert_allclose(align.self_constrained(alpha, 5), alpha, atol=1e-15)

    def test_first_step_unchanged(self):
        alpha = align.expected_alignment(random_p(4, (3, 5)))
        for eps in range(4):
            np.testing.assert_allclose(align.self_constrained(alpha, eps)[0], alpha[0], atol=1e-15)

    def test_rejects_negative_epsilon(self):
        with pytest.raises(ValueError):
            align.self_constrained(ALPHA_HALF, -1)


class TestMutuallyConstrained:
    def test_two_heads_half(self):
        alphas = align.expected_alignment(np.full((2, 1, 3), 0.5))
        got = align.mutually_constrained(alphas, 1)
        np.testing.assert_allclose(got, np.tile([0.5, 0.375, 0.09375, 0.03125], (2, 1, 1)), atol=1e-15)
        np.testing.assert_allclose(got, oracle.constrained_by_direct_sum(alphas, 1), atol=1e-12)

    def test_single_head_is_alpha(self):
        alpha = align.expected_alignment(random_p(8, (1, 4, 6)))
        for eps in range(8):
            np.testing.assert_allclose(align.mutually_constrained(alpha, eps), alpha, atol=1e-15)

    def test_vacuous_for_large_epsilon(self):
        alphas = align.expected_alignment(random_p(9, (3, 4, 6)))
        np.testing.assert_allclose(align.mutually_constrained(alphas, 6), alphas, atol=1e-15)

    def test_zero_mass_propagation(self):
        # head 1 always stops at frame 1, so head 0 cannot select beyond 1 + epsilon
        p = np.full((2, 2, 6), 0.3)
        p[1] = 1.0
        alphas = align.expected_alignment(p)
        got = align.mutually_constrained(alphas, 2)
        assert np.all(got[0, :, 4:6] == 0.0)
        # first term of frame 3 survives, the rest of head 0's mass is pushed to frame 3
        assert got[0, 0, 2] > alphas[0, 0, 2]

    def test_constrain_dispatch(self):
        alphas = align.expected_alignment(random_p(12, (2, 3, 4)))
        cfg = align.ConstraintConfig(epsilon=1, num_heads=2)
        np.testing.assert_array_equal(align.constrain(alphas, cfg), align.mutually_constrained(alphas, 1))
        cfg = align.ConstraintConfig(epsilon=1, num_heads=2, mode="self_constrained")
        np.testing.assert_array_equal(align.constrain(alphas, cfg), align.self_constrained(alphas, 1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            align.ConstraintConfig(epsilon=-1)
        with pytest.raises(ValueError):
            align.ConstraintConfig(epsilon=1, num_heads=0)
        with pytest.raises(ValueError):
            align.ConstraintConfig(epsilon=1, mode="both")

    def test_constrain_checks_head_count(self):
        alphas = align.expected_alignment(random_p(12, (2, 3, 4)))
        with pytest.raises(ValueError):
            align.constrain(alphas, align.ConstraintConfig(epsilon=1, num_heads=3))


class TestConstrainedProperties:
    @settings(max_examples=150, deadline=None)
    @given(prob_arrays(), st.integers(0, 10), st.booleans())
    def test_rows_sum_to_one(self, p, eps, sub_probability):
        T = p.shape[-1]
        a0 = None
        if sub_probability:
            a0 = np.linspace(1.0, 2.0, T)
            a0 *= 0.6 / a0.sum()
        alphas = align.expected_alignment(p, a0)
        for out in (align.mutually_constrained(alphas, eps), align.self_constrained(alphas, eps)):
            np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-9)
            assert out.min() >= -1e-12

    @settings(max_examples=100, deadline=None)
    @given(prob_arrays(max_T=7), st.integers(0, 9))
    def test_agree_with_direct_sum(self, p, eps):
        alphas = align.expected_alignment(p)
        np.testing.assert_allclose(align.mutually_constrained(alphas, eps), oracle.constrained_by_direct_sum(alphas, eps), atol=1e-12)
        ref = oracle.constrained_by_direct_sum(alphas, eps, mode="self_constrained")
        np.testing.assert_allclose(align.self_constrained(alphas, eps), ref, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(prob_arrays(max_M=1, max_L=4, max_T=7))
    def test_alpha_agrees_with_enumeration(self, p):
        np.testing.assert_allclose(align.expected_alignment(p[0]), oracle.alpha_by_enumeration(p[0]), atol=1e-12)


class TestChunkAttention:
    def test_width_one_is_identity(self):
        w = align.expected_alignment(random_p(1, (3, 5)))[:, :5]
        np.testing.assert_array_equal(align.chunk_attention(w, random_p(2, (3, 5)), 1), w)

    def test_one_hot_uniform_energy_splits_evenly(self):
        a = np.array([[0.0, 0.0, 1.0, 0.0]])
        np.testing.assert_allclose(align.chunk_attention(a, np.zeros((1, 4)), 2), [[0.0, 0.5, 0.5, 0.0]], atol=1e-15)

    def test_hand_expanded_example(self):
        # frames [0.5, 0.25], width 2, equal energies:
        # beta_1 = 0.5 * 1/1 + 0.25 * 1/2, beta_2 = 0.25 * 1/2
        got = align.chunk_attention(np.array([[0.5, 0.25]]), np.zeros((1, 2)), 2)
        np.testing.assert_allclose(got, [[0.625, 0.125]], atol=1e-15)

    def test_preserves_row_mass(self):
        a = align.expected_alignment(random_p(5, (4, 9)))[:, :9]
        u = np.random.default_rng(6).normal(scale=3.0, size=(4, 9))
        for width in (1, 2, 3, 9, 20):
            np.testing.assert_allclose(align.chunk_attention(a, u, width).sum(-1), a.sum(-1), atol=1e-12)

    def test_large_energies_are_stable(self):
        a = np.array([[0.2, 0.3, 0.5]])
        u = np.array([[800.0, -800.0, 790.0]])
        out = align.chunk_attention(a, u, 3)
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(1.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            align.chunk_attention(np.ones((1, 2)) / 2, np.zeros((1, 2)), 0)
        with pytest.raises(ValueError):
            align.chunk_attention(np.ones((1, 2)) / 2, np.array([[0.0, np.inf]]), 2)


class TestExpectedContext:
    def test_one_hot_selects_state(self):
        h = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(align.expected_context(np.array([[0, 0, 1.0, 0]]), h), [h[2]])

    def test_zero_weights(self):
        np.testing.assert_array_equal(align.expected_context(np.zeros((2, 3)), np.ones((3, 4))), np.zeros((2, 4)))

    def test_average(self):
        np.testing.assert_allclose(align.expected_context(np.array([[0.5, 0.5]]), np.array([[2.0], [4.0]])), [[3.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            align.expected_context(np.ones((1, 3)), np.ones((4, 2)))
