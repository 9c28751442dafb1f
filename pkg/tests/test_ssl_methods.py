import math

import numpy as np
import pytest

from bamssl.bayes_head import PosteriorPredictive, VariationalLinear
from bamssl.errors import ConfigurationError, InputError
from bamssl.nn_core import Network, softmax, softmax_cross_entropy
from bamssl.ssl_methods import (
    Classifier,
    SelectionState,
    combined_step_loss,
    get_preset,
    kl_coefficient_schedule,
    preset_catalog,
    q_warmup,
    select_by_confidence,
    select_by_variance,
    sharpen,
    sharpen_backward,
    unlabeled_loss,
    variance_scores,
)

from gradcheck import numeric_grad, rel_error


def pp_from(mean, std):
    return PosteriorPredictive(np.asarray(mean, float), np.asarray(std, float), 2)


class TestSharpen:
    def test_identity_temperature(self, rng):
        q = softmax(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(sharpen(q, 1.0), q, atol=1e-15)

    def test_half_temperature(self):
        out = sharpen([0.8, 0.2], 0.5)
        np.testing.assert_allclose(out, [0.64 / 0.68, 0.04 / 0.68], atol=1e-15)
        np.testing.assert_allclose(out, [0.9412, 0.0588], atol=5e-5)

    def test_hard(self):
        assert sharpen([0.6, 0.4], hard=True).tolist() == [1.0, 0.0]

    def test_zero_mass(self):
        with pytest.raises(InputError):
            sharpen([0.0, 0.0], 0.5)

    def test_backward_matches_differences(self, rng):
        q = softmax(rng.normal(size=(4, 3)))
        up = rng.normal(size=(4, 3))
        g = sharpen_backward(q, 0.4, up)
        num = numeric_grad(lambda: float((sharpen(q, 0.4) * up).sum()), q)
        assert rel_error(g, num) < 1e-4


class TestConfidence:
    def test_zero_threshold(self, rng):
        assert select_by_confidence(softmax(rng.normal(size=(5, 3))), 0.0).all()

    def test_example(self):
        q = np.array([[0.96, 0.04], [0.90, 0.10]])
        assert select_by_confidence(q, 0.95).tolist() == [True, False]

    def test_uniform_rejected(self):
        assert not select_by_confidence(np.full((2, 4), 0.25), 0.3).any()


class TestVariance:
    def test_scores_at_predicted_class(self):
        pp = pp_from([[0.7, 0.3], [0.2, 0.8]], [[0.1, 0.5], [0.4, 0.2]])
        np.testing.assert_allclose(variance_scores(pp), [0.01, 0.04])

    def test_median_example(self):
        mean = np.tile([0.9, 0.1], (4, 1))
        std = np.column_stack([np.sqrt([1.0, 2.0, 3.0, 4.0]), np.zeros(4)])
        mask, state = select_by_variance(pp_from(mean, std), SelectionState(), 0.5)
        assert state.threshold == pytest.approx(2.5, abs=1e-12)
        assert mask.tolist() == [True, True, False, False]

    def test_zero_variance_accepted(self):
        state = SelectionState()
        state.push(0.3)
        mask, _ = select_by_variance(pp_from(np.full((3, 2), 0.5), np.zeros((3, 2))), state, 0.9)
        assert mask.all()

    def test_queue_eviction(self):
        state = SelectionState()
        for v in range(50):
            state.push(float(v))
        assert state.threshold == pytest.approx(24.5)
        state.push(100.0)
        assert len(state.recent_thresholds) == 50
        assert state.recent_thresholds[0] == 1.0
        assert state.threshold == pytest.approx((sum(range(1, 50)) + 100.0) / 50)

    def test_empty_batch(self):
        with pytest.raises(InputError):
            select_by_variance(pp_from(np.zeros((0, 2)), np.zeros((0, 2))), SelectionState(), 0.5)

    def test_bad_quantile(self):
        with pytest.raises(ConfigurationError):
            select_by_variance(pp_from([[1.0, 0.0]], [[0.0, 0.0]]), SelectionState(), 0.0)

    def test_scale_equivariance(self, rng):
        mean = softmax(rng.normal(size=(20, 3)))
        std = rng.uniform(0, 0.3, size=(20, 3))
        batches = [rng.permutation(20)[:12] for _ in range(5)]

        def masks(c):
            state = SelectionState()
            out = []
            for idx in batches:
                m, state = select_by_variance(pp_from(mean[idx], np.sqrt(c) * std[idx]), state, 0.75)
                out.append(m)
            return out

        for a, b in zip(masks(1.0), masks(8.0)):
            assert np.array_equal(a, b)

    def test_std_estimate_stabilizes_with_m(self):
        # fixed layer; spread of the std estimate across noise sets shrinks as M grows
        from bamssl.bayes_head import bayes_predict

        rng = np.random.default_rng(11)
        layer = VariationalLinear(rng.normal(size=(2, 3)), np.full((2, 3), -1.0), np.zeros(3), np.full(3, -1.0))
        v = rng.normal(size=(4, 2))
        spreads = []
        for M in (2, 10, 50):
            est = [bayes_predict(layer, v, M, rng).std for _ in range(40)]
            spreads.append(np.std(est, axis=0).mean())
        assert spreads[0] > spreads[1] > spreads[2]


class TestUnlabeledLoss:
    def test_empty_mask(self, rng):
        q = softmax(rng.normal(size=(3, 2)))
        loss, grad = unlabeled_loss(q, rng.normal(size=(3, 2)), np.zeros(3, bool), get_preset("UDA"))
        assert loss == 0.0 and not grad.any()

    def test_perfect_agreement(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits = np.array([[60.0, 0.0], [0.0, 60.0]])
        loss, _ = unlabeled_loss(q, logits, np.ones(2, bool), get_preset("FM"))
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_hand_oracle(self):
        # hard labels: [0, 1]; only the first sample is accepted; denominator is 2
        q = np.array([[0.7, 0.3], [0.2, 0.8]])
        logits = np.array([[1.0, 0.0], [0.0, 2.0]])
        loss, _ = unlabeled_loss(q, logits, np.array([True, False]), get_preset("FM"))
        expected = -math.log(math.e / (math.e + 1.0)) / 2
        assert loss == pytest.approx(expected, abs=1e-15)

    def test_hard_equals_argmax_one_hot(self, rng):
        q = softmax(rng.normal(size=(6, 4)))
        logits = rng.normal(size=(6, 4))
        mask = np.ones(6, bool)
        loss, grad = unlabeled_loss(q, logits, mask, get_preset("PL"))
        ref_loss, ref_grad = softmax_cross_entropy(logits, q.argmax(axis=1))
        assert loss == ref_loss
        assert np.array_equal(grad, ref_grad)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            unlabeled_loss(np.ones((2, 2)) / 2, np.zeros((3, 2)), np.ones(2, bool), get_preset("UDA"))


class TestPresets:
    def test_catalog(self):
        cat = preset_catalog()
        assert sorted(cat) == ["BAM-FM", "BAM-PL", "BAM-UDA", "FM", "PL", "UDA"]
        assert all(p.lam == 1.0 for p in cat.values())
        assert cat["UDA"].tau == 0.8 and cat["UDA"].t == 0.4 and cat["UDA"].mu == 7
        assert cat["BAM-UDA"].t == 0.9
        assert cat["PL"].mu == 1 and cat["PL"].hard and cat["PL"].augmentation == "symmetric"
        assert cat["FM"].tau == 0.95 and cat["FM"].hard
        assert all(cat[n].selection == "variance" for n in cat if n.startswith("BAM-"))

    def test_bam_differs_only_where_stated(self):
        cat = preset_catalog()
        for name in ("PL", "FM"):
            a, b = cat[name], cat["BAM-" + name]
            assert (a.mu, a.lam, a.tau, a.t, a.augmentation) == (b.mu, b.lam, b.tau, b.t, b.augmentation)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            get_preset("MixMatch")


class TestSchedules:
    def test_q_warmup(self):
        assert q_warmup(0, 0.75) == pytest.approx(0.1)
        assert q_warmup(5, 0.75) == pytest.approx(0.425)
        assert q_warmup(10, 0.75) == 0.75
        assert q_warmup(37, 0.75) == 0.75

    def test_q_warmup_target_too_low(self):
        with pytest.raises(ConfigurationError):
            q_warmup(3, 0.05)

    def test_kl_ramp(self):
        assert kl_coefficient_schedule(0, 10) == 0.0
        assert kl_coefficient_schedule(5, 10) == pytest.approx(0.5)
        assert kl_coefficient_schedule(10, 10) == 1.0
        assert kl_coefficient_schedule(3, 0) == 1.0


def classifier(rng, bayes=False):
    if bayes:
        net = Network.mlp([2, 6, 5], rng, final_activation="relu")
        return Classifier(net, VariationalLinear.init(5, 3, rng))
    return Classifier(Network.mlp([2, 6, 3], rng))


def batch(rng):
    return (rng.normal(size=(4, 2)), rng.integers(0, 3, size=4),
            rng.normal(size=(8, 2)), rng.normal(size=(8, 2)))


class TestCombined:
    def test_lambda_zero_is_supervised(self, rng):
        model = classifier(rng)
        xl, yl, xw, xs = batch(rng)
        out = combined_step_loss(model, xl, yl, xw, xs, get_preset("UDA"), lam=0.0)
        ref, _ = softmax_cross_entropy(model.net.predict(xl), yl)
        assert out.total == pytest.approx(ref, abs=1e-15)

    def test_non_bayes_has_no_kl(self, rng):
        xl, yl, xw, xs = batch(rng)
        out = combined_step_loss(classifier(rng), xl, yl, xw, xs, get_preset("FM"))
        assert out.kl == 0.0

    def test_bam_components_sum(self, rng):
        xl, yl, xw, xs = batch(rng)
        out = combined_step_loss(classifier(rng, True), xl, yl, xw, xs, get_preset("BAM-UDA"),
                                 state=SelectionState(), Q=0.5, M=4, dataset_size=100, rng=rng)
        assert out.total == out.labeled + out.unlabeled + out.kl
        assert out.kl > 0

    def test_bam_needs_variational_head(self, rng):
        xl, yl, xw, xs = batch(rng)
        with pytest.raises(ConfigurationError):
            combined_step_loss(classifier(rng), xl, yl, xw, xs, get_preset("BAM-FM"),
                               state=SelectionState())

    def test_weak_branch_is_detached(self, rng):
        model = classifier(rng)
        xl, yl, xw, xs = batch(rng)
        preset = get_preset("UDA")
        model.zero_grads()
        out = combined_step_loss(model, xl, yl, xw, xs, preset)
        frozen = out.pseudo_probs.copy()
        mask = out.mask.copy()

        def loss():
            l_loss = softmax_cross_entropy(model.net.predict(xl), yl)[0]
            return l_loss + unlabeled_loss(frozen, model.net.predict(xs), mask, preset)[0]

        for p in model.net.params():
            assert rel_error(p.grad, numeric_grad(loss, p.value)) < 1e-4
