import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gated_fusion.exceptions import DimensionError, DomainError
from gated_fusion.losses import (BceConfig, DegenerateSimilarityError, NtxentConfig,
                                 batch_contrastive_loss, bce_with_logits, ntxent_pair_loss,
                                 positive_weights)


def naive_bce(u, y, p):
    s = 1 / (1 + np.exp(-u))
    return float(np.mean(-(p * y * np.log(s) + (1 - y) * np.log(1 - s))))


def brute_ntxent(za, zb, tau, include_positive=True):
    """Enumerate every anchor and candidate with explicit exp/log."""
    views = [v / math.sqrt(sum(x * x for x in v)) for v in list(za) + list(zb)]
    n, B = len(views), len(za)
    total = 0.0
    for i in range(n):
        p = (i + B) % n
        cos = lambda j: float(sum(a * b for a, b in zip(views[i], views[j])))  # noqa: E731
        denom = 0.0
        for j in range(n):
            if j == i or (j == p and not include_positive):
                continue
            denom += math.exp(cos(j) / tau)
        total += -math.log(math.exp(cos(p) / tau) / denom)
    return total / n


class TestBce:
    def test_ln2(self):
        assert bce_with_logits(np.array([0.0]), np.array([1]))[0] == pytest.approx(math.log(2),
                                                                                  rel=1e-12)

    def test_large_logit_is_tiny_and_finite(self):
        loss, grad = bce_with_logits(np.array([100.0]), np.array([1]))
        assert 0 <= loss < 1e-40 and np.isfinite(grad).all()

    def test_positive_weight_doubles(self):
        loss, _ = bce_with_logits(np.array([0.0]), np.array([1]), BceConfig(pos_weight=[2.0]))
        assert loss == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            u = rng.uniform(-20, 20, (6, 5))
            y = rng.integers(0, 2, (6, 5))
            p = rng.uniform(0.5, 5, 5)
            loss, _ = bce_with_logits(u, y, BceConfig(pos_weight=p))
            assert abs(loss - naive_bce(u, y, p)) < 1e-6

    def test_finite_at_extremes(self):
        u = np.array([[-1e4, -100.0, 100.0, 1e4]])
        for y in (np.zeros((1, 4)), np.ones((1, 4))):
            loss, grad = bce_with_logits(u, y)
            assert math.isfinite(loss) and np.isfinite(grad).all()

    @given(st.floats(-50, 50), st.integers(0, 1), st.floats(0.1, 10))
    def test_gradient_matches_difference(self, u, y, p):
        cfg = BceConfig(pos_weight=[p])
        _, g = bce_with_logits(np.array([u]), np.array([y]), cfg)
        h = 1e-6
        num = (bce_with_logits(np.array([u + h]), np.array([y]), cfg)[0]
               - bce_with_logits(np.array([u - h]), np.array([y]), cfg)[0]) / (2 * h)
        assert g[0] == pytest.approx(num, abs=1e-6)

    def test_sum_reduction_and_sample_weights(self):
        u, y = np.zeros((2, 2)), np.ones((2, 2))
        loss, _ = bce_with_logits(u, y, BceConfig(sample_weight=[1.0, 3.0], reduction="sum"))
        assert loss == pytest.approx(8 * math.log(2))

    def test_errors(self):
        with pytest.raises(DomainError):
            bce_with_logits(np.zeros(2), np.array([0, 2]))
        with pytest.raises(DimensionError):
            bce_with_logits(np.zeros(2), np.zeros(3))
        with pytest.raises(DomainError):
            BceConfig(pos_weight=[1.0, 0.0])

    def test_positive_weights_ratio_and_clip(self):
        labels = np.array([[1, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 1]])
        np.testing.assert_array_equal(positive_weights(labels), [3.0, 10.0, 1.0])


class TestNtxentPair:
    def test_no_negatives_zero(self):
        assert ntxent_pair_loss([1.0, 0.0], [2.0, 0.0]) == pytest.approx(0.0, abs=1e-15)

    def test_one_orthogonal_negative(self):
        e2 = math.exp(2)
        loss = ntxent_pair_loss([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]])
        assert loss == pytest.approx(-math.log(e2 / (e2 + 1)), rel=1e-12)
        assert loss == pytest.approx(0.126928, abs=1e-6)

    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        a, p, n = rng.standard_normal((3, 4))
        assert ntxent_pair_loss(c * a, c * p, [c * n]) == pytest.approx(
            ntxent_pair_loss(a, p, [n]), rel=1e-9, abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(DegenerateSimilarityError):
            ntxent_pair_loss([0.0, 0.0], [1.0, 0.0])

    def test_bad_config(self):
        with pytest.raises(DomainError):
            NtxentConfig(temperature=0)
        with pytest.raises(DomainError):
            NtxentConfig(denominator="both")


class TestNtxentBatch:
    def test_orthogonal_pairs(self):
        za = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        zb = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]])
        # Siblings identical, everything else orthogonal.
        loss, _, _ = batch_contrastive_loss(za, za.copy())
        e2 = math.exp(2)
        assert loss == pytest.approx(-math.log(e2 / (e2 + 2)), rel=1e-12)
        assert brute_ntxent(za, za, 0.5) == pytest.approx(loss, rel=1e-12)
        assert np.isfinite(batch_contrastive_loss(za, zb)[0])

    @pytest.mark.parametrize("B", [2, 3, 5])
    def test_identical_trailers(self, B):
        z = np.ones((B, 3))
        assert batch_contrastive_loss(z, z)[0] == pytest.approx(math.log(2 * B - 1), rel=1e-12)

    @pytest.mark.parametrize("mode", ["include-positive", "exclude-positive"])
    def test_matches_brute_force(self, mode):
        cfg = NtxentConfig(0.5, mode)
        for B in (2, 3, 4, 8):
            for seed in range(100):
                rng = np.random.default_rng(seed)
                za, zb = rng.standard_normal((2, B, 5))
                loss = batch_contrastive_loss(za, zb, cfg)[0]
                assert abs(loss - brute_ntxent(za, zb, 0.5, mode == "include-positive")) < 1e-6

    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_scale_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        za, zb = rng.standard_normal((2, 4, 3))
        assert batch_contrastive_loss(c * za, c * zb)[0] == pytest.approx(
            batch_contrastive_loss(za, zb)[0], rel=1e-9)

    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        za, zb = rng.standard_normal((2, 5, 3))
        perm = rng.permutation(5)
        assert batch_contrastive_loss(za[perm], zb[perm])[0] == pytest.approx(
            batch_contrastive_loss(za, zb)[0], rel=1e-12)

    def test_gradient_matches_difference(self):
        rng = np.random.default_rng(3)
        za, zb = rng.standard_normal((2, 3, 4))
        _, ga, _ = batch_contrastive_loss(za, zb)
        h = 1e-6
        num = np.zeros_like(za)
        for idx in np.ndindex(*za.shape):
            up, down = za.copy(), za.copy()
            up[idx] += h
            down[idx] -= h
            num[idx] = (batch_contrastive_loss(up, zb)[0]
                        - batch_contrastive_loss(down, zb)[0]) / (2 * h)
        np.testing.assert_allclose(ga, num, atol=1e-8)

    def test_sum_reduction(self):
        rng = np.random.default_rng(1)
        za, zb = rng.standard_normal((2, 3, 4))
        mean = batch_contrastive_loss(za, zb)[0]
        total = batch_contrastive_loss(za, zb, NtxentConfig(reduction="sum"))[0]
        assert total == pytest.approx(6 * mean, rel=1e-12)

    def test_errors(self):
        with pytest.raises(DomainError):
            batch_contrastive_loss(np.ones((1, 3)), np.ones((1, 3)))
        with pytest.raises(DimensionError):
            batch_contrastive_loss(np.ones((2, 3)), np.ones((3, 3)))
        with pytest.raises(DegenerateSimilarityError):
            batch_contrastive_loss(np.zeros((2, 3)), np.ones((2, 3)))
