import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcases
from mdcs import losses, netcore
from mdcs.losses import DistillConfig, DistributionWeight

mp = pytest.importorskip("mpmath")

finite = st.floats(-30, 30, allow_nan=False)


def plain_softmax(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mp_diversity_softmax(v, counts, lam, T=1):
    """Count-weighted form n_k^lam * exp(v_k / T) / sum(...), evaluated at 50 digits."""
    with mp.workdps(50):
        terms = [mp.mpf(int(n)) ** mp.mpf(float(lam)) * mp.e ** (mp.mpf(float(x)) / mp.mpf(float(T))) for x, n in zip(v, counts)]
        total = mp.fsum(terms)
        return [t / total for t in terms]


class TestDiversitySoftmax:
    def test_uniform_logits_give_normalized_counts(self):
        p = losses.diversity_softmax([0.0, 0.0, 0.0], DistributionWeight(1.0, [100, 10, 1]))
        np.testing.assert_allclose(p, np.array([100, 10, 1]) / 111, rtol=0, atol=1e-15)

    def test_three_class_value(self):
        p = losses.diversity_softmax([0.5, 0.0, -0.5], DistributionWeight(1.0, [4, 2, 1]))
        expected = [0.716725041814, 0.217357856222, 0.065917101964]
        np.testing.assert_allclose(p, expected, rtol=0, atol=1e-12)
        oracle = [float(x) for x in mp_diversity_softmax([0.5, 0, -0.5], [4, 2, 1], 1)]
        np.testing.assert_allclose(p, oracle, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_against_count_weighted_form(self, seed):
        rng = np.random.default_rng(seed)
        v, counts = 4 * rng.standard_normal(6), rng.integers(1, 500, 6)
        lam, T = rng.uniform(-1, 3), rng.uniform(0.5, 4)
        p = losses.diversity_softmax(v, DistributionWeight(lam, counts), T)
        oracle = [float(x) for x in mp_diversity_softmax(v, counts, lam, T)]
        np.testing.assert_allclose(p, oracle, rtol=1e-13, atol=1e-16)

    def test_no_overflow_for_large_logits(self):
        p = losses.diversity_softmax([1000.0, 0.0], DistributionWeight(3.0, [1, 10**6]))
        assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)

    def test_non_finite_logits(self):
        with pytest.raises(netcore.NumericError):
            losses.diversity_softmax([np.nan, 0.0], DistributionWeight(1.0, [2, 1]))

    def test_counts_below_one_rejected(self):
        with pytest.raises(ValueError):
            DistributionWeight(1.0, [3, 0])

    @given(arrays(np.float64, 5, elements=finite), st.floats(-50, 50), st.floats(-1, 3))
    @settings(max_examples=200)
    def test_shift_invariance(self, v, c, lam):
        dw = DistributionWeight(lam, [50, 20, 9, 3, 1])
        np.testing.assert_allclose(losses.diversity_softmax(v + c, dw), losses.diversity_softmax(v, dw), atol=1e-12)

    @given(arrays(np.float64, 4, elements=finite), st.floats(1, 100), st.floats(-1, 3), st.floats(0.2, 5))
    @settings(max_examples=200)
    def test_count_scaling_cancels(self, v, k, lam, T):
        counts = np.array([40.0, 12.0, 5.0, 1.0])
        a = losses.diversity_softmax(v, DistributionWeight(lam, counts * k), T)
        b = losses.diversity_softmax(v, DistributionWeight(lam, counts), T)
        np.testing.assert_allclose(a, b, atol=1e-12)

    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(0.1, 10))
    @settings(max_examples=200)
    def test_rows_are_distributions(self, v, T):
        p = losses.diversity_softmax(v, DistributionWeight(1.5, [9, 4, 2, 1]), T)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestDiversityLoss:
    def test_two_class_example(self):
        loss, grad = losses.diversity_loss([0.0, 0.0], [0, 1], DistributionWeight(1.0, [9, 1]))
        with mp.workdps(50):
            assert loss == pytest.approx(float(-mp.log(mp.mpf(1) / 10)), abs=1e-14)
        assert loss == pytest.approx(2.30258509299, abs=1e-11)
        np.testing.assert_allclose(grad, [0.9, -0.9], atol=1e-15)

    def test_integer_labels_match_one_hot(self):
        dw = DistributionWeight(1.0, [9, 4, 1])
        v = np.array([[0.3, -1.0, 2.0], [1.0, 0.0, -0.5]])
        a = losses.diversity_loss(v, [2, 0], dw)
        b = losses.diversity_loss(v, np.eye(3)[[2, 0]], dw)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_logits_cancelling_weights_give_log_c(self):
        dw = DistributionWeight(2.0, [30, 7, 2, 1])
        loss, _ = losses.diversity_loss(-dw.w, 2, dw)
        assert loss == pytest.approx(math.log(4), abs=1e-14)

    def test_confident_correct_prediction_goes_to_zero(self):
        dw = DistributionWeight(0.0, [5, 5, 5])
        values = [losses.diversity_loss([t, 0.0, 0.0], 0, dw)[0] for t in (1, 10, 40)]
        assert values[0] > values[1] > values[2] and values[2] < 1e-16

    def test_batch_gradient_is_p_minus_y_over_n(self):
        rng = np.random.default_rng(2)
        v, y = rng.standard_normal((5, 3)), np.array([0, 2, 1, 1, 0])
        dw = DistributionWeight(1.0, [20, 4, 1])
        _, grad = losses.diversity_loss(v, y, dw)
        np.testing.assert_allclose(grad, (losses.diversity_softmax(v, dw) - np.eye(3)[y]) / 5, atol=1e-16)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError):
            losses.diversity_loss(np.zeros((2, 3)), np.array([[1, 1, 0], [0, 0, 1]]), DistributionWeight(1, [3, 2, 1]))

    @given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
    @settings(max_examples=200)
    def test_lambda_zero_is_plain_cross_entropy(self, v, y):
        loss, grad = losses.diversity_loss(v, y, DistributionWeight(0.0, [100, 10, 1]))
        p = plain_softmax(v)
        z = v - v.max(axis=1, keepdims=True)
        ce = -(z[np.arange(4), y] - np.log(np.exp(z).sum(axis=1))).mean()
        assert abs(loss - ce) <= 1e-12
        np.testing.assert_allclose(grad, (p - np.eye(3)[y]) / 4, rtol=0, atol=1e-12)


class TestConfidentSet:
    def test_example(self):
        probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        assert losses.confident_set(probs, [0, 1, 0]).tolist() == [0, 1]

    def test_all_wrong_is_empty(self):
        assert losses.confident_set(np.eye(3), [1, 2, 0]).size == 0

    def test_tie_goes_to_lowest_index(self):
        assert losses.confident_set(np.array([[0.5, 0.5]]), [0]).tolist() == [0]
        assert losses.confident_set(np.array([[0.5, 0.5]]), [1]).size == 0

    @given(arrays(np.float64, (6, 4), elements=finite), st.floats(0.05, 20), st.floats(-1, 3))
    @settings(max_examples=200)
    def test_membership_ignores_temperature(self, v, T, lam):
        dw = DistributionWeight(lam, [80, 20, 6, 1])
        labels = np.array([0, 1, 2, 3, 0, 1])
        ref = losses.confident_set(losses.diversity_softmax(v, dw, 1.0), labels)
        cfg = DistillConfig(temperature=T)
        assert np.array_equal(losses.cs_loss(v, v + 1.0, labels, dw, cfg).confident, ref)


def kl_views(teacher, student):
    """Logits whose plain softmax is exactly the given distributions (lambda = 0, T = 1)."""
    return np.log([teacher]), np.log([student])


class TestCsLoss:
    cfg = DistillConfig(temperature=1.0)
    dw = DistributionWeight(0.0, [7, 3])

    def test_kl_example(self):
        weak, strong = kl_views([0.8, 0.2], [0.6, 0.4])
        res = losses.cs_loss(weak, strong, [0], self.dw, self.cfg)
        with mp.workdps(50):
            oracle = mp.mpf("0.8") * mp.log(mp.mpf(4) / 3) + mp.mpf("0.2") * mp.log(mp.mpf(1) / 2)
        assert res.loss == pytest.approx(float(oracle), abs=1e-15)
        assert res.loss == pytest.approx(0.0915162218494, abs=1e-12)
        np.testing.assert_allclose(res.grad_strong, [[-0.2, 0.2]], atol=1e-15)

    def test_identical_views_give_zero(self):
        v = np.random.default_rng(0).standard_normal((4, 2))
        res = losses.cs_loss(v, v, [0, 1, 0, 1], self.dw, DistillConfig())
        assert res.loss == 0.0 and np.all(res.grad_strong == 0)

    def test_misclassified_weak_view_gates_everything(self):
        weak = np.array([[3.0, 0.0], [0.0, 3.0]])
        strong = np.random.default_rng(1).standard_normal((2, 2)) * 10
        res = losses.cs_loss(weak, strong, [1, 0], self.dw, DistillConfig(detach_teacher=False))
        assert res.loss == 0.0 and res.confident.size == 0
        assert np.all(res.grad_strong == 0) and np.all(res.grad_weak == 0)

    def test_gradient_zero_outside_confident_set(self):
        rng = np.random.default_rng(3)
        weak, strong = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        labels = np.array([0, 1, 0, 1, 0, 1])
        res = losses.cs_loss(weak, strong, labels, self.dw, DistillConfig(detach_teacher=False))
        outside = np.setdiff1d(np.arange(6), res.confident)
        assert outside.size and res.confident.size
        assert np.all(res.grad_strong[outside] == 0) and np.all(res.grad_weak[outside] == 0)

    def test_detached_teacher_has_no_weak_gradient(self):
        weak, strong = kl_views([0.8, 0.2], [0.6, 0.4])
        a = losses.cs_loss(weak, strong, [0], self.dw, self.cfg)
        b = losses.cs_loss(weak + [[0.3, 0.0]], strong, [0], self.dw, self.cfg)
        assert a.loss != b.loss
        assert np.all(a.grad_weak == 0) and np.all(b.grad_weak == 0)

    def test_temperature_divides_strong_gradient(self):
        rng = np.random.default_rng(4)
        weak, strong = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
        weak[0, 0] += 5
        dw = DistributionWeight(1.0, [9, 3, 1])
        res = losses.cs_loss(weak, strong, [0], dw, DistillConfig(temperature=2.5))
        p_t, p_s = losses.diversity_softmax(weak, dw, 2.5), losses.diversity_softmax(strong, dw, 2.5)
        np.testing.assert_allclose(res.grad_strong, (p_s - p_t) / 2.5, atol=1e-15)

    @given(arrays(np.float64, (5, 3), elements=finite), arrays(np.float64, (5, 3), elements=finite))
    @settings(max_examples=200)
    def test_non_negative(self, weak, strong):
        res = losses.cs_loss(weak, strong, [0, 1, 2, 0, 1], DistributionWeight(1.0, [10, 3, 1]), DistillConfig())
        assert res.loss >= 0.0


def random_views(seed, M=3, n=10, C=4):
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 100, C)
    dws = [DistributionWeight(lam, counts) for lam in losses.default_lambdas(M)]
    weak = [2 * rng.standard_normal((n, C)) for _ in range(M)]
    strong = [w + rng.standard_normal((n, C)) for w in weak]
    return weak, strong, rng.integers(0, C, n), dws


class TestTotalLoss:
    def test_alpha_zero_is_dl_sum_exactly(self):
        weak, strong, y, dws = random_views(0)
        out = losses.total_loss_from_logits(weak, strong, y, dws, DistillConfig(alpha=0.0))
        dl = 0.0
        for w, s, dw in zip(weak, strong, dws):
            dl += 0.5 * (losses.diversity_loss(w, y, dw)[0] + losses.diversity_loss(s, y, dw)[0])
        assert out.value == dl
        assert out.consistency == [0.0] * 3

    def test_single_expert_plain_case_is_cross_entropy(self):
        rng = np.random.default_rng(5)
        v, y = rng.standard_normal((7, 3)), rng.integers(0, 3, 7)
        out = losses.total_loss_from_logits([v], [v], y, [DistributionWeight(0.0, [5, 3, 1])],
                                            DistillConfig(temperature=1.0))
        z = v - v.max(axis=1, keepdims=True)
        ce = -(z[np.arange(7), y] - np.log(np.exp(z).sum(axis=1))).mean()
        assert out.value == pytest.approx(ce, abs=1e-14)

    def test_additive_over_experts(self):
        weak, strong, y, dws = random_views(1)
        cfg = DistillConfig()
        full = losses.total_loss_from_logits(weak, strong, y, dws, cfg)
        part = losses.total_loss_from_logits(weak[:2], strong[:2], y, dws[:2], cfg)
        alone = losses.total_loss_from_logits(weak[2:], strong[2:], y, dws[2:], cfg)
        assert full.value == pytest.approx(part.value + alone.value, abs=1e-14)
        assert full.value == pytest.approx(sum(full.diversity) + 0.6 * sum(full.consistency), abs=1e-14)
        np.testing.assert_array_equal(full.dlogits[2], alone.dlogits[0])

    def test_strong_only_supervision(self):
        weak, strong, y, dws = random_views(2, M=1)
        out = losses.total_loss_from_logits(weak, strong, y, dws,
                                            DistillConfig(alpha=0.0, supervise_both_views=False))
        assert out.value == losses.diversity_loss(strong[0], y, dws[0])[0]
        assert np.all(out.dlogits[0][:10] == 0)

    def test_dlogits_stack_weak_over_strong(self):
        weak, strong, y, dws = random_views(3, M=2, n=6)
        out = losses.total_loss_from_logits(weak, strong, y, dws, DistillConfig())
        assert all(g.shape == (12, 4) for g in out.dlogits)

    def test_model_path_matches_logit_path(self):
        rng = np.random.default_rng(6)
        model = netcore.MultiExpertModel.initialize(4, [8], 3, [-0.5, 2.5], seed=1)
        wx, sx, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
        dws = [DistributionWeight(lam, [30, 5, 1]) for lam in model.lambdas]
        out = losses.total_loss(model, wx, sx, y, dws, DistillConfig())
        wl, _ = netcore.forward(model, wx)
        sl, _ = netcore.forward(model, sx)
        ref = losses.total_loss_from_logits(wl, sl, y, dws, DistillConfig())
        assert out.value == pytest.approx(ref.value, abs=1e-14)

    def test_expert_count_mismatch(self):
        model = netcore.MultiExpertModel.initialize(4, [8], 3, [-0.5, 2.5], seed=1)
        with pytest.raises(ValueError):
            losses.total_loss(model, np.ones((2, 4)), np.ones((2, 4)), [0, 1],
                              [DistributionWeight(1, [3, 2, 1])], DistillConfig())


class TestDefaultLambdas:
    @pytest.mark.parametrize("M,expected", [
        (1, [1.0]), (2, [-0.5, 2.5]), (3, [-0.5, 1.0, 2.5]), (4, [-0.5, 0.0, 1.0, 2.5]),
        (5, [-0.5, 0.0, 1.0, 2.0, 2.5]), (6, [-1.0, -0.5, 0.0, 2.0, 2.5, 3.0]),
        (7, [-1.0, -0.5, 0.0, 1.0, 2.0, 2.5, 3.0]),
    ])
    def test_table(self, M, expected):
        assert losses.default_lambdas(M) == expected

    def test_many_experts_spread(self):
        lams = losses.default_lambdas(9)
        assert len(lams) == 9 and lams[0] == -1.0 and lams[-1] == 3.0 and lams == sorted(lams)

    def test_zero_experts(self):
        with pytest.raises(ValueError):
            losses.default_lambdas(0)


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("case", ["DL", "CS", "CS (teacher attached)", "total (logits)"])
    def test_loss_gradients(self, case, seed):
        fn, params = gradcases.LOSS_CASES[case](seed)
        report = netcore.grad_check(fn, params, h=1e-3, tolerance=1e-4)
        assert report.passed, (report.max_rel_error, report.worst)

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("case", ["total (end to end)", "total (end to end, teacher attached)"])
    def test_end_to_end_error_is_second_order(self, case, seed):
        # a correct gradient leaves only the O(h^2) truncation error of central differences
        fn, params = gradcases.LOSS_CASES[case](seed)
        coarse = netcore.grad_check(fn, params, h=1e-3).max_rel_error
        fine = netcore.grad_check(fn, params, h=5e-4).max_rel_error
        assert coarse / fine == pytest.approx(4.0, rel=0.05)
        assert netcore.grad_check(fn, params, h=1e-4).passed

    def test_detached_gradient_differs_from_full_derivative(self):
        fn, params = gradcases.LOSS_CASES["total (end to end)"](0)
        full, _ = gradcases.LOSS_CASES["total (end to end, teacher attached)"](0)
        a = fn(params)[1]
        b = full(params)[1]
        assert fn(params)[0] == pytest.approx(full(params)[0], abs=1e-14)
        assert any(not np.allclose(a[k], b[k]) for k in a)
