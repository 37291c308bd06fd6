import math

import numpy as np
import pytest

from disco import tensor as T
from disco.errors import (
    ContractViolationError,
    DegenerateInputError,
    DimensionError,
)
from disco.losses import (
    LabelMatrix,
    LossConfig,
    class_histogram,
    class_mean_activations,
    disco_loss,
    feature_histogram,
    gini_loss,
    kl_loss,
    normalize_labels,
    row_normalize,
    total_loss,
)
from disco.tensor import Tensor, finite_diff_check

import oracles

EPS = 1e-8


def random_instance(rng, m, c, n, h=2, w=2):
    """Random batch with at least one positively pooled channel.

    A batch where every pooled activation clamps to zero is a documented
    degenerate-input error, tested separately.
    """
    while True:
        a = rng.uniform(-2.0, 2.0, (m, c, h, w))
        labels = rng.integers(0, n, m)
        if (a.mean(axis=(2, 3)) > 0).any():
            return a, labels


class TestLabelMatrix:
    def test_from_labels_counts(self):
        y = LabelMatrix.from_labels([0, 0, 1], 2)
        assert y.m == 3 and y.n == 2
        np.testing.assert_array_equal(y.class_counts(), [2, 1])

    def test_rejects_two_hot_rows(self):
        with pytest.raises(Exception):
            LabelMatrix([[1.0, 1.0], [0.0, 1.0]])

    def test_present_classes_mask(self):
        y = LabelMatrix.from_labels([2, 2, 0], 4)
        np.testing.assert_array_equal(y.present_classes(), [True, False, True, False])


class TestNormalizeLabels:
    def test_counting_case(self):
        y = LabelMatrix.from_labels([0, 0, 1], 2)
        np.testing.assert_allclose(
            normalize_labels(y), [[0.5, 0.0], [0.5, 0.0], [0.0, 1.0]]
        )

    def test_one_sample_per_class_is_identity(self):
        y = LabelMatrix.from_labels([2, 0, 1], 3)
        np.testing.assert_array_equal(normalize_labels(y), y.matrix)

    def test_column_sums_zero_or_one(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            y = LabelMatrix.from_labels(rng.integers(0, 3, 6), 3)
            sums = normalize_labels(y).sum(axis=0)
            for s in sums:
                assert abs(s) < 1e-12 or abs(s - 1.0) < 1e-12

    def test_absent_class_column_stays_zero(self):
        y = LabelMatrix.from_labels([0, 0], 3)
        ybar = normalize_labels(y)
        np.testing.assert_array_equal(ybar[:, 1:], np.zeros((2, 2)))


class TestClassMeanActivations:
    def test_all_ones_activations(self):
        y = LabelMatrix.from_labels([0, 1, 1], 2)
        m_pooled = Tensor(np.ones((3, 4)))
        s = class_mean_activations(m_pooled, normalize_labels(y))
        np.testing.assert_allclose(s.data, np.ones((4, 2)))

    def test_single_sample_per_class_permutes(self):
        rng = np.random.default_rng(12)
        m_pooled = rng.uniform(0, 1, (3, 5))
        y = LabelMatrix.from_labels([2, 0, 1], 3)
        s = class_mean_activations(Tensor(m_pooled), normalize_labels(y))
        # column j of S is the pooled row of the sample labelled j
        np.testing.assert_allclose(s.data[:, 2], m_pooled[0])
        np.testing.assert_allclose(s.data[:, 0], m_pooled[1])
        np.testing.assert_allclose(s.data[:, 1], m_pooled[2])

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(13)
        pooled = rng.uniform(0, 2, (5, 4))
        labels = rng.integers(0, 3, 5)
        y = LabelMatrix.from_labels(labels, 3)
        s = class_mean_activations(Tensor(pooled), normalize_labels(y)).data
        for i in range(4):
            for j in range(3):
                members = [pooled[k, i] for k in range(5) if labels[k] == j]
                want = sum(members) / len(members) if members else 0.0
                assert abs(s[i, j] - want) < 1e-12


class TestRowNormalize:
    def test_symmetric_row(self):
        out = row_normalize(Tensor([[2.0, 2.0]]), EPS).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-8)

    def test_concentrated_row(self):
        out = row_normalize(Tensor([[1.0, 0.0, 0.0]]), EPS).data
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-7)

    def test_row_sums_near_one(self):
        rng = np.random.default_rng(14)
        s = Tensor(rng.uniform(0.01, 2.0, (4, 3)))
        sums = row_normalize(s, EPS).data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-6)

    def test_zero_row_stays_zero(self):
        out = row_normalize(Tensor([[0.0, 0.0], [1.0, 1.0]]), EPS).data
        np.testing.assert_array_equal(out[0], [0.0, 0.0])

    def test_negative_entry_rejected(self):
        with pytest.raises(ContractViolationError):
            row_normalize(Tensor([[1.0, -0.5]]), EPS)


class TestGiniLoss:
    def test_one_hot_rows_give_zero(self):
        sbar = Tensor(np.eye(4)[[0, 2, 1, 3, 3]])
        assert abs(gini_loss(sbar).item()) < 1e-12

    def test_uniform_rows_n4(self):
        sbar = Tensor(np.full((3, 4), 0.25))
        assert abs(gini_loss(sbar).item() - 0.75) < 1e-12

    def test_hand_value(self):
        sbar = Tensor([[0.8, 0.2], [0.5, 0.5]])
        assert abs(gini_loss(sbar).item() - 0.41) < 1e-12

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(15)
        rows = rng.uniform(0, 1, (6, 4))
        rows /= rows.sum(axis=1, keepdims=True)
        got = gini_loss(Tensor(rows)).item()
        assert abs(got - oracles.reference_gini(rows.tolist())) < 1e-12


class TestHistograms:
    def test_feature_histogram_concentration(self):
        sbar = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
        h = feature_histogram(sbar, EPS).data
        np.testing.assert_allclose(h, [1.0, 0.0], atol=1e-8)

    def test_feature_histogram_uniform(self):
        sbar = Tensor(np.full((5, 4), 0.25))
        h = feature_histogram(sbar, EPS).data
        np.testing.assert_allclose(h, np.full(4, 0.25), atol=1e-8)

    def test_feature_histogram_hand_value(self):
        sbar = Tensor([[0.8, 0.2], [0.5, 0.5]])
        h = feature_histogram(sbar, EPS).data
        np.testing.assert_allclose(h, [0.65, 0.35], atol=1e-7)

    def test_feature_histogram_rejects_all_zero(self):
        with pytest.raises(DegenerateInputError):
            feature_histogram(Tensor(np.zeros((2, 3))), EPS)

    def test_class_histogram_counting(self):
        y = LabelMatrix.from_labels([0, 0, 1, 2], 3)
        np.testing.assert_array_equal(class_histogram(y), [0.5, 0.25, 0.25])

    def test_class_histogram_balanced(self):
        y = LabelMatrix.from_labels(np.repeat(np.arange(100), 5), 100)
        np.testing.assert_allclose(class_histogram(y), np.full(100, 0.01))

    def test_class_histogram_empty_batch(self):
        y = LabelMatrix(np.zeros((0, 3)))
        with pytest.raises(DegenerateInputError):
            class_histogram(y)


class TestKlLoss:
    def test_identical_distributions(self):
        h = np.array([0.25, 0.5, 0.25])
        assert kl_loss(Tensor(h), h, EPS).item() == 0.0

    def test_hand_value(self):
        got = kl_loss(Tensor([0.5, 0.5]), np.array([0.25, 0.75]), EPS).item()
        want = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert abs(got - want) < 1e-6
        assert abs(got - oracles.reference_kl([0.5, 0.5], [0.25, 0.75], EPS)) < 1e-15

    def test_mass_on_empty_class_is_bounded(self):
        got = kl_loss(Tensor([1.0, 0.0]), np.array([0.0, 1.0]), EPS).item()
        bound = math.log((1.0 + EPS) / EPS)
        assert np.isfinite(got)
        assert got <= bound + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            kl_loss(Tensor([0.5, 0.5]), np.array([1.0, 0.0, 0.0]), EPS)


class TestDiscoLoss:
    def test_constant_activations_balanced_labels(self):
        n = 4
        y = LabelMatrix.from_labels([0, 1, 2, 3] * 2, n)
        a = Tensor(np.full((8, 5, 2, 2), 3.0))
        l_gini, l_kl = disco_loss(a, y, LossConfig())
        assert abs(l_gini.item() - (1.0 - 1.0 / n)) < 1e-6
        assert abs(l_kl.item()) < 1e-6

    def test_diagonal_responses_give_zero_gini(self):
        m = n = c = 3
        a = np.zeros((m, c, 2, 2))
        for i in range(m):
            a[i, i] = 5.0
        y = LabelMatrix.from_labels(np.arange(n), n)
        l_gini, _ = disco_loss(Tensor(a), y, LossConfig())
        assert abs(l_gini.item()) < 1e-6

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(16)
        cfg = LossConfig()
        for _ in range(30):
            m = int(rng.integers(1, 9))
            c = int(rng.integers(1, 6))
            n = int(rng.integers(2, 6))
            a, labels = random_instance(rng, m, c, n)
            ref = oracles.reference_pipeline(a.tolist(), labels.tolist(), n, cfg.epsilon)
            y = LabelMatrix.from_labels(labels, n)
            l_gini, l_kl = disco_loss(Tensor(a), y, cfg)
            assert abs(l_gini.item() - ref["gini"]) < 1e-10
            assert abs(l_kl.item() - ref["kl"]) < 1e-10

    def test_batch_size_mismatch(self):
        y = LabelMatrix.from_labels([0, 1], 2)
        with pytest.raises(DimensionError):
            disco_loss(Tensor(np.ones((3, 2, 2, 2))), y, LossConfig())

    def test_all_dead_batch_propagates_degenerate_error(self):
        y = LabelMatrix.from_labels([0, 1], 2)
        a = Tensor(np.full((2, 3, 2, 2), -1.0))  # every pooled mean clamps to 0
        with pytest.raises(DegenerateInputError):
            disco_loss(a, y, LossConfig())


class TestPipelineProperties:
    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(17)
        cfg = LossConfig()
        for _ in range(10):
            n = 4
            a, labels = random_instance(rng, 8, 3, n)
            perm = rng.permutation(n)
            y = LabelMatrix.from_labels(labels, n)
            y_perm = LabelMatrix.from_labels(perm[labels], n)
            g1, k1 = disco_loss(Tensor(a), y, cfg)
            g2, k2 = disco_loss(Tensor(a), y_perm, cfg)
            assert abs(g1.item() - g2.item()) < 1e-12
            assert abs(k1.item() - k2.item()) < 1e-12

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(18)
        cfg = LossConfig()
        for _ in range(10):
            a, labels = random_instance(rng, 6, 4, 3)
            order = rng.permutation(6)
            g1, k1 = disco_loss(Tensor(a), LabelMatrix.from_labels(labels, 3), cfg)
            g2, k2 = disco_loss(
                Tensor(a[order]), LabelMatrix.from_labels(labels[order], 3), cfg
            )
            assert abs(g1.item() - g2.item()) < 1e-12
            assert abs(k1.item() - k2.item()) < 1e-12

    def test_positive_scaling_invariance(self):
        rng = np.random.default_rng(19)
        cfg = LossConfig()
        for alpha in (0.5, 2.0, 10.0):
            a, labels = random_instance(rng, 8, 3, 3)
            a = np.abs(a) + 0.5  # keep row sums well above the epsilon regime
            y = LabelMatrix.from_labels(labels, 3)
            g1, k1 = disco_loss(Tensor(a), y, cfg)
            g2, k2 = disco_loss(Tensor(alpha * a), y, cfg)
            assert abs(g1.item() - g2.item()) < 1e-6
            assert abs(k1.item() - k2.item()) < 1e-6

    def test_ranges(self):
        rng = np.random.default_rng(20)
        cfg = LossConfig()
        for _ in range(30):
            n = int(rng.integers(2, 6))
            a, labels = random_instance(rng, 8, 4, n)
            y = LabelMatrix.from_labels(labels, n)
            g, k = disco_loss(Tensor(a), y, cfg)
            assert -1e-12 <= g.item() <= 1.0 - 1.0 / n + 1e-12
            assert k.item() >= -1e-6

    def test_gradients_vs_finite_differences(self):
        # non-negative activations, the regime the loss actually runs in
        # (it taps a post-rectifier layer)
        rng = np.random.default_rng(21)
        cfg = LossConfig()
        for _ in range(5):
            a = rng.uniform(0.1, 2.1, (4, 3, 2, 2))
            labels = rng.integers(0, 3, 4)
            y = LabelMatrix.from_labels(labels, 3)
            err_g = finite_diff_check(lambda t: disco_loss(t, y, cfg)[0], Tensor(a))
            err_k = finite_diff_check(lambda t: disco_loss(t, y, cfg)[1], Tensor(a))
            assert err_g < 1e-4
            assert err_k < 1e-4

    def test_gradients_with_signed_activations(self):
        # with signed inputs some class-mean rows collapse to a single
        # nonzero entry; the true gradients there are epsilon-scale tails,
        # so agreement is checked in absolute terms alongside relative
        rng = np.random.default_rng(22)
        cfg = LossConfig()
        for _ in range(5):
            a, labels = random_instance(rng, 4, 3, 3)
            y = LabelMatrix.from_labels(labels, 3)
            for branch in (0, 1):
                f = lambda t: disco_loss(t, y, cfg)[branch]
                x = Tensor(a.copy(), requires_grad=True)
                f(x).backward()
                analytic = x.grad.reshape(-1)
                flat = a.copy().reshape(-1)
                h = 1e-5
                for i in range(flat.size):
                    s = flat[i]
                    flat[i] = s + h
                    fp = f(Tensor(flat.reshape(a.shape))).item()
                    flat[i] = s - h
                    fm = f(Tensor(flat.reshape(a.shape))).item()
                    flat[i] = s
                    num = (fp - fm) / (2 * h)
                    diff = abs(analytic[i] - num)
                    rel = diff / max(abs(analytic[i]), abs(num), 1e-12)
                    assert rel < 1e-4 or diff < 1e-8

    def test_reverse_kl_flag(self):
        rng = np.random.default_rng(22)
        a, labels = random_instance(rng, 6, 3, 3)
        y = LabelMatrix.from_labels(labels, 3)
        _, k_fwd = disco_loss(Tensor(a), y, LossConfig())
        _, k_rev = disco_loss(Tensor(a), y, LossConfig(kl_reverse=True))
        ref = oracles.reference_pipeline(a.tolist(), labels.tolist(), 3, 1e-8)
        want_rev = oracles.reference_kl(ref["h_class"], ref["h_feat"], 1e-8)
        assert abs(k_rev.item() - want_rev) < 1e-10
        assert k_fwd.item() != k_rev.item()


class TestTotalLoss:
    def test_zero_weights_return_primary(self):
        cfg = LossConfig(lambda1=0.0, lambda2=0.0, gate_epoch=0)
        l_star = Tensor(np.asarray(2.5))
        out = total_loss(l_star, Tensor(np.asarray(0.4)), Tensor(np.asarray(0.1)), cfg, 50)
        assert out is l_star

    def test_gate_blocks_auxiliary_terms(self):
        cfg = LossConfig(lambda1=0.5, lambda2=0.5, gate_epoch=10)
        l_star = Tensor(np.asarray(2.0))
        for epoch in range(10):
            out = total_loss(l_star, Tensor(np.asarray(9.9)), Tensor(np.asarray(9.9)), cfg, epoch)
            assert out is l_star

    def test_gated_arithmetic(self):
        cfg = LossConfig(lambda1=0.5, lambda2=0.5, gate_epoch=10)
        out = total_loss(
            Tensor(np.asarray(2.0)),
            Tensor(np.asarray(0.4)),
            Tensor(np.asarray(0.1)),
            cfg,
            10,
        )
        assert abs(out.item() - 2.25) < 1e-12

    def test_gradient_reaches_auxiliaries_only_when_gated(self):
        l_star = Tensor(np.asarray(1.0), requires_grad=True)
        l_gini = Tensor(np.asarray(0.5), requires_grad=True)
        l_kl = Tensor(np.asarray(0.2), requires_grad=True)
        cfg = LossConfig(lambda1=0.5, lambda2=0.25, gate_epoch=5)

        total_loss(l_star, l_gini, l_kl, cfg, 4).backward()
        assert l_gini.grad is None and l_kl.grad is None

        l_star2 = Tensor(np.asarray(1.0), requires_grad=True)
        out = total_loss(l_star2, l_gini, l_kl, cfg, 5)
        out.backward()
        np.testing.assert_allclose(l_gini.grad, 0.5)
        np.testing.assert_allclose(l_kl.grad, 0.25)
