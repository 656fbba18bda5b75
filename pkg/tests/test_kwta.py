import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kwtalab.kwta import (
    ActivationPattern,
    KwtaConfig,
    activation_pattern,
    k_from_gamma,
    kwta_backward,
    kwta_forward,
    kwta_forward_chw,
    pattern_margin,
)
from kwtalab.tensor import make_rng


def sort_oracle(y, k):
    """Winners by a stable full sort on (value desc, index asc)."""
    order = sorted(range(len(y)), key=lambda j: (-y[j], j))
    winners = sorted(order[:k])
    out = np.zeros_like(y)
    out[winners] = y[winners]
    return out, tuple(winners)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestKFromGamma:
    @pytest.mark.parametrize("gamma,n,k", [(0.1, 64, 6), (1.0, 5, 5), (0.01, 10, 1), (0.08, 1250, 100),
                                           (0.29, 100, 29)])
    def test_values(self, gamma, n, k):
        assert k_from_gamma(gamma, n) == k

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
    def test_rejects_gamma(self, gamma):
        with pytest.raises(ValueError):
            k_from_gamma(gamma, 10)

    def test_config_validates(self):
        with pytest.raises(ValueError):
            KwtaConfig(0.0)


class TestForward:
    def test_example(self):
        np.testing.assert_array_equal(kwta_forward(np.array([3.0, 1, 2, 5]), 2), [3, 0, 0, 5])

    def test_tie_goes_to_smaller_index(self):
        np.testing.assert_array_equal(kwta_forward(np.array([2.0, 2, 1]), 1), [2, 0, 0])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            kwta_forward(np.ones(3), 0)
        with pytest.raises(ValueError):
            kwta_forward(np.ones(3), 4)

    def test_random_vectors_match_oracle(self):
        rng = make_rng(0)
        for _ in range(2000):
            y = rng.standard_normal(128)
            out, _ = sort_oracle(y, 13)
            assert kwta_forward(y, 13).tobytes() == out.tobytes()

    def test_negative_winners_keep_values(self):
        np.testing.assert_array_equal(kwta_forward(np.array([-3.0, -1, -2]), 2), [0, -1, -2])

    def test_batched_rows_independent(self):
        rng = make_rng(2)
        Y = rng.integers(-3, 3, size=(50, 20)).astype(float)
        out = kwta_forward(Y, 5)
        for row, o in zip(Y, out):
            assert o.tobytes() == sort_oracle(row, 5)[0].tobytes()

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.integers(-4, 4).map(float)), st.data())
    def test_property_matches_oracle_with_ties(self, y, data):
        k = data.draw(st.integers(1, len(y)))
        out, winners = sort_oracle(y, k)
        assert kwta_forward(y, k).tobytes() == out.tobytes()
        assert activation_pattern(y, k).indices == winners

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=finite), st.data())
    def test_idempotent(self, y, data):
        k = data.draw(st.integers(1, len(y)))
        once = kwta_forward(y, k)
        if np.sort(y)[::-1][k - 1] >= 0:
            np.testing.assert_array_equal(kwta_forward(once, k), once)

    def test_not_idempotent_with_negative_winners(self):
        # zeroed losers outrank a negative winner on the second pass
        once = kwta_forward(np.array([-1.0, -2.0]), 1)
        np.testing.assert_array_equal(once, [-1.0, 0.0])
        np.testing.assert_array_equal(kwta_forward(once, 1), [0.0, 0.0])

    def test_scale_invariant_distinct_values(self):
        rng = make_rng(4)
        for _ in range(200):
            y = rng.standard_normal(50)
            for c in (0.001, 0.5, 7.0, 1e4):
                assert activation_pattern(c * y, 9) == activation_pattern(y, 9)


class TestPattern:
    def test_example(self):
        assert activation_pattern(np.array([3.0, 1, 2, 5]), 2).indices == (0, 3)

    def test_all_ties(self):
        assert activation_pattern(np.zeros(3), 2).indices == (0, 1)

    def test_random_against_argsort(self):
        rng = make_rng(1)
        for _ in range(500):
            y = rng.standard_normal(64)
            top = tuple(sorted(np.argsort(-y, kind="stable")[:7].tolist()))
            assert activation_pattern(y, 7).indices == top

    def test_always_k(self):
        rng = make_rng(3)
        for _ in range(100):
            y = rng.integers(0, 2, 30).astype(float)
            assert len(activation_pattern(y, 11)) == 11

    def test_nonzero_outputs_are_winners(self):
        y = np.array([0.0, 1.0, 0.0, -1.0])
        p = activation_pattern(y, 2)
        out = kwta_forward(y, 2)
        assert all(j in p for j in np.flatnonzero(out))
        assert p.indices == (0, 1)

    def test_pattern_validation(self):
        with pytest.raises(ValueError):
            ActivationPattern((2, 1), 4)
        with pytest.raises(ValueError):
            ActivationPattern((0, 4), 4)


class TestBackward:
    def test_mask(self):
        p = ActivationPattern((0, 3), 4)
        np.testing.assert_array_equal(kwta_backward(np.ones(4), p), [1, 0, 0, 1])

    def test_zero(self):
        np.testing.assert_array_equal(kwta_backward(np.zeros(4), ActivationPattern((1, 2), 4)), np.zeros(4))

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            kwta_backward(np.ones(5), ActivationPattern((1, 2), 4))

    def test_finite_differences(self):
        rng = make_rng(8)
        checked = 0
        while checked < 20:
            y = rng.standard_normal(40)
            k = 9
            if pattern_margin(y, k) <= 1e-3:
                continue
            a = rng.standard_normal(40)

            def loss(v):
                return float(a @ kwta_forward(v, k) + 0.5 * (kwta_forward(v, k) ** 2).sum())

            analytic = kwta_backward(a + kwta_forward(y, k), activation_pattern(y, k))
            h = 1e-6
            fd = np.array([(loss(y + h * e) - loss(y - h * e)) / (2 * h) for e in np.eye(40)])
            assert np.abs(fd - analytic).max() <= 1e-5 * max(1.0, np.abs(analytic).max())
            checked += 1


class TestChw:
    def test_vector_case(self):
        t = np.array([3.0, 1, 2, 5]).reshape(1, 1, 4)
        np.testing.assert_array_equal(kwta_forward_chw(t, KwtaConfig(0.5)), np.array([3.0, 0, 0, 5]).reshape(1, 1, 4))

    def test_identity_at_gamma_one(self):
        t = make_rng(0).standard_normal((3, 4, 5))
        np.testing.assert_array_equal(kwta_forward_chw(t, KwtaConfig(1.0)), t)

    def test_flattened_oracle(self):
        rng = make_rng(6)
        for _ in range(50):
            t = rng.standard_normal((3, 2, 2))
            expected = sort_oracle(t.reshape(-1), 3)[0].reshape(3, 2, 2)
            out = kwta_forward_chw(t, KwtaConfig(0.25))
            assert out.shape == t.shape
            assert out.tobytes() == expected.tobytes()

    def test_rejects_non_chw(self):
        with pytest.raises(ValueError):
            kwta_forward_chw(np.ones(4), KwtaConfig(0.5))


def test_pattern_margin():
    assert pattern_margin(np.array([5.0, 1.0, 3.0]), 1) == 2.0
    assert pattern_margin(np.array([5.0, 1.0, 3.0]), 3) == np.inf
