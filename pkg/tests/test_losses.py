import numpy as np
import pytest

from pixseg.errors import InvalidParameterError
from pixseg.losses import (IGNORE_LABEL, combine_losses, consistency_grad,
                           consistency_loss, cosine_similarity,
                           cross_entropy_map, image_contrastive_loss,
                           output_ce_consistency, output_ce_consistency_grad,
                           pixel_contrastive_grad, pixel_contrastive_loss,
                           pixel_feature_consistency,
                           pixel_feature_consistency_grad, softmax_sharpen,
                           supervised_ce, supervised_ce_grad)


def numeric_grad(fn, x, step=1e-5):
    """Central finite differences, the independent oracle for every gradient."""
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp = x.astype(float).copy()
        xm = x.astype(float).copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def rel_err(numeric, analytic):
    scale = max(np.abs(numeric).max(), 1e-12)
    return np.abs(numeric - analytic).max() / scale


class TestCosineSimilarity:
    def test_identical(self):
        assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(0.70710678, abs=1e-8)

    def test_both_zero_warns_and_returns_zero(self):
        with pytest.warns(RuntimeWarning):
            assert cosine_similarity([0.0, 0.0], [0.0, 0.0]) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(InvalidParameterError):
            cosine_similarity([1, 0], [1, 0, 0])

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            u = rng.normal(size=4)
            v = rng.normal(size=4)
            assert -1.0 - 1e-12 <= cosine_similarity(u, v) <= 1.0 + 1e-12


class TestSoftmaxSharpen:
    def test_symmetry(self):
        for c in (-3.0, 0.0, 17.5):
            out = softmax_sharpen([c, c, c], 0.5)
            np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-12)

    def test_hand_values(self):
        np.testing.assert_allclose(softmax_sharpen([1, 0], 1.0),
                                   [0.73106, 0.26894], atol=1e-5)
        np.testing.assert_allclose(softmax_sharpen([1, 0], 0.5),
                                   [0.88080, 0.11920], atol=1e-5)

    def test_bad_temperature(self):
        with pytest.raises(InvalidParameterError):
            softmax_sharpen([1, 0], 0.0)
        with pytest.raises(InvalidParameterError):
            softmax_sharpen([1, 0], -1.0)

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            z = rng.normal(size=7) * 10
            p = softmax_sharpen(z, 0.5)
            assert abs(p.sum() - 1.0) < 1e-9
            np.testing.assert_allclose(p, softmax_sharpen(z + 123.4, 0.5), atol=1e-12)

    def test_overflow_safe(self):
        p = softmax_sharpen([1e4, 0.0], 0.5)
        assert np.isfinite(p).all()


class TestConsistencyLoss:
    def test_identical(self):
        assert consistency_loss([0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.0, abs=1e-9)

    def test_orthogonal_onehots(self):
        assert consistency_loss([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_hand_value(self):
        # cos = 0.32 / 0.68
        assert consistency_loss([0.8, 0.2], [0.2, 0.8]) == pytest.approx(0.52941, abs=1e-5)

    def test_dim_mismatch(self):
        with pytest.raises(InvalidParameterError):
            consistency_loss([1, 0], [1, 0, 0])

    def test_symmetric_value(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.dirichlet(np.ones(5))
            b = rng.dirichlet(np.ones(5))
            assert consistency_loss(a, b) == pytest.approx(consistency_loss(b, a))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            w = rng.dirichlet(np.ones(6))
            s = rng.dirichlet(np.ones(6))
            g = consistency_grad(w, s)
            num = numeric_grad(lambda v: consistency_loss(w, v), s)
            assert rel_err(num, g) < 1e-4


class TestPixelContrastive:
    def test_equal_similarity_reduces_to_log_n_plus_1(self):
        z = np.array([0.3, -0.7, 1.1])
        loss = pixel_contrastive_loss(z, z, np.tile(z, (4, 1)), tau=0.07)
        assert loss == pytest.approx(np.log(5.0), abs=1e-9)

    def test_hand_value(self):
        loss = pixel_contrastive_loss([1, 0], [1, 0], [[0, 1], [0, -1]], tau=1.0)
        assert loss == pytest.approx(np.log(1 + 2 / np.e), abs=1e-9)

    def test_strictly_positive_fuzz(self):
        rng = np.random.default_rng(4)
        for _ in range(2000):
            d = rng.integers(2, 6)
            n = rng.integers(1, 6)
            loss = pixel_contrastive_loss(rng.normal(size=d), rng.normal(size=d),
                                          rng.normal(size=(n, d)))
            assert loss > 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=6)
        p = rng.normal(size=6)
        negs = rng.normal(size=(4, 6))
        base = pixel_contrastive_loss(a, p, negs)
        for alpha in (0.5, 2.0, 10.0):
            assert abs(pixel_contrastive_loss(alpha * a, p, negs) - base) < 1e-9
            assert abs(pixel_contrastive_loss(a, alpha * p, negs) - base) < 1e-9
            scaled = negs.copy()
            scaled[1] *= alpha
            assert abs(pixel_contrastive_loss(a, p, scaled) - base) < 1e-9

    def test_monotonicity(self):
        # raising cos(z, z+) lowers the loss; raising a negative sim raises it
        def with_sims(pos_sim, neg_sims, tau=0.5):
            a = np.array([1.0, 0.0])
            p = np.array([pos_sim, np.sqrt(1 - pos_sim ** 2)])
            negs = np.array([[s, np.sqrt(1 - s ** 2)] for s in neg_sims])
            return pixel_contrastive_loss(a, p, negs, tau)

        losses = [with_sims(s, [0.1, 0.2]) for s in (-0.5, 0.0, 0.5, 0.9)]
        assert all(x > y for x, y in zip(losses, losses[1:]))
        losses = [with_sims(0.5, [s, 0.2]) for s in (-0.5, 0.0, 0.5, 0.9)]
        assert all(x < y for x, y in zip(losses, losses[1:]))

    def test_needs_a_negative(self):
        with pytest.raises(InvalidParameterError):
            pixel_contrastive_loss([1, 0], [1, 0], np.zeros((0, 2)))

    def test_bad_tau(self):
        with pytest.raises(InvalidParameterError):
            pixel_contrastive_loss([1, 0], [1, 0], [[0, 1]], tau=0.0)


class TestPixelContrastiveGrad:
    def test_matches_finite_differences_100_seeds(self):
        # normalized per instance: the whole stacked gradient, not per vector,
        # so near-zero individual components do not blow up the ratio
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = rng.normal(size=8)
            p = rng.normal(size=8)
            negs = rng.normal(size=(5, 8))
            da, dp, dn = pixel_contrastive_grad(a, p, negs, tau=0.07)
            num_a = numeric_grad(lambda v: pixel_contrastive_loss(v, p, negs, 0.07), a)
            num_p = numeric_grad(lambda v: pixel_contrastive_loss(a, v, negs, 0.07), p)
            num_n = np.stack([numeric_grad(
                lambda v, j=j: pixel_contrastive_loss(
                    a, p, np.vstack([negs[:j], v[None], negs[j + 1:]]), 0.07),
                negs[j]) for j in range(5)])
            numeric = np.concatenate([num_a, num_p, num_n.ravel()])
            analytic = np.concatenate([da, dp, dn.ravel()])
            worst = max(worst, rel_err(numeric, analytic))
        assert worst < 1e-4

    def test_identical_vectors_positive_term_stationary(self):
        z = np.array([0.5, -1.0, 2.0])
        _, dp, _ = pixel_contrastive_grad(z, z, np.tile(z, (3, 1)))
        num = numeric_grad(
            lambda v: pixel_contrastive_loss(z, v, np.tile(z, (3, 1))), z.copy())
        assert np.abs(dp).max() < 1e-8
        assert np.abs(num).max() < 1e-8

    def test_anchor_grad_orthogonal_to_anchor(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a = rng.normal(size=6)
            da, _, _ = pixel_contrastive_grad(a, rng.normal(size=6),
                                              rng.normal(size=(4, 6)))
            cosang = abs(np.dot(da, a)) / (np.linalg.norm(da) * np.linalg.norm(a))
            assert cosang < 1e-6


class TestSupervisedCE:
    def test_confident_correct(self):
        logits = np.zeros(5)
        logits[2] = 50.0
        assert supervised_ce(logits, 2) < 1e-6

    def test_uniform_21_classes(self):
        assert supervised_ce(np.zeros(21), 7) == pytest.approx(np.log(21), abs=1e-9)

    def test_ignore(self):
        assert supervised_ce(np.array([1.0, 2.0]), IGNORE_LABEL) == 0.0
        np.testing.assert_array_equal(
            supervised_ce_grad(np.array([1.0, 2.0]), IGNORE_LABEL), [0.0, 0.0])

    def test_out_of_range(self):
        with pytest.raises(InvalidParameterError):
            supervised_ce(np.zeros(3), 3)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = rng.normal(size=5)
            g = supervised_ce_grad(z, 1)
            num = numeric_grad(lambda v: supervised_ce(v, 1), z)
            assert rel_err(num, g) < 1e-4


class TestCrossEntropyMap:
    def test_ignore_excluded_from_denominator(self):
        logits = np.zeros((2, 2, 3))
        labels = np.array([[0, IGNORE_LABEL], [IGNORE_LABEL, IGNORE_LABEL]])
        loss, grad = cross_entropy_map(logits, labels)
        assert loss == pytest.approx(np.log(3))
        assert np.all(grad[0, 1] == 0) and np.all(grad[1] == 0)

    def test_matches_per_pixel_mean(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(3, 4, 5))
        labels = rng.integers(0, 5, size=(3, 4))
        loss, _ = cross_entropy_map(logits, labels)
        manual = np.mean([supervised_ce(logits[i, j], int(labels[i, j]))
                          for i in range(3) for j in range(4)])
        assert loss == pytest.approx(manual)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(2, 2, 3))
        labels = np.array([[0, 2], [IGNORE_LABEL, 1]])
        _, grad = cross_entropy_map(logits, labels)
        num = numeric_grad(lambda v: cross_entropy_map(v.reshape(2, 2, 3), labels)[0],
                           logits.ravel()).reshape(2, 2, 3)
        assert rel_err(num, grad) < 1e-4


class TestCombineLosses:
    def test_defaults_arithmetic(self):
        out = combine_losses(1.0, 2.0, 3.0, 0.3, 1.0)
        assert out.total == pytest.approx(4.6)

    def test_supervised_only(self):
        assert combine_losses(1.0, 2.0, 3.0, 0.0, 0.0).total == 1.0

    def test_negative_coefficients(self):
        with pytest.raises(InvalidParameterError):
            combine_losses(1.0, 1.0, 1.0, -0.1, 1.0)

    def test_identity_bit_for_bit(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            sup, con, cy = rng.random(3) * 10
            l1, l2 = rng.random(2)
            out = combine_losses(sup, con, cy, l1, l2)
            assert out.total == sup + l1 * con + l2 * cy


class TestLossVariants:
    def test_image_contrastive_equals_pixel_loss_on_pooled(self):
        rng = np.random.default_rng(10)
        w = rng.normal(size=6)
        s = rng.normal(size=6)
        negs = rng.normal(size=(3, 6))
        assert image_contrastive_loss(w, s, negs) == pixel_contrastive_loss(w, s, negs)

    def test_constant_map_pooling_identity(self):
        vec = np.array([0.2, -0.4, 1.0])
        fmap = np.broadcast_to(vec, (4, 4, 3))
        pooled = fmap.mean(axis=(0, 1))
        np.testing.assert_allclose(pooled, vec)

    def test_pixel_feature_consistency_values(self):
        v = np.array([1.0, 2.0])
        assert pixel_feature_consistency(v, v) == pytest.approx(0.0)
        assert pixel_feature_consistency(v, -v) == pytest.approx(2.0)
        assert pixel_feature_consistency([1, 0], [1, 1]) == pytest.approx(0.29289, abs=1e-5)

    def test_pixel_feature_consistency_grad(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=5)
        s = rng.normal(size=5)
        g = pixel_feature_consistency_grad(w, s)
        num = numeric_grad(lambda v: pixel_feature_consistency(w, v), s)
        assert rel_err(num, g) < 1e-4

    def test_output_ce_confident_match(self):
        logits = np.zeros(4)
        logits[1] = 50.0
        weak = np.zeros(4)
        weak[1] = 1.0
        assert output_ce_consistency(weak, logits) < 1e-6

    def test_output_ce_uniform_target_bound(self):
        c = 6
        weak = np.full(c, 1 / c)
        rng = np.random.default_rng(13)
        for _ in range(50):
            z = rng.normal(size=c)
            assert output_ce_consistency(weak, z) >= np.log(c) - 1e-12
        assert output_ce_consistency(weak, np.zeros(c)) == pytest.approx(np.log(c))

    def test_output_ce_hand_value(self):
        assert output_ce_consistency([0.7, 0.3], [0.0, 0.0]) == pytest.approx(
            0.69315, abs=1e-5)

    def test_output_ce_grad(self):
        rng = np.random.default_rng(14)
        weak = rng.dirichlet(np.ones(5))
        z = rng.normal(size=5)
        g = output_ce_consistency_grad(weak, z)
        num = numeric_grad(lambda v: output_ce_consistency(weak, v), z)
        assert rel_err(num, g) < 1e-4
