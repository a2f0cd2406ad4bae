import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predalign import alignkit as ak
from predalign import numkernel as nk
from predalign.detector import DetectorConfig, DetectorModel
from predalign.numkernel import PROB_EPS, Tensor

LN2 = math.log(2)


def blind(disc):
    """Zero the output layer so the discriminator answers 0.5 everywhere."""
    for k, p in disc.params.items():
        if k.startswith(("conv2", "fc2")):
            p.data[...] = 0
    return disc


def tiny_model(seed=0):
    return DetectorModel(DetectorConfig(image_side=16, channels=(4, 6, 6), templates=((4.0, 1.0), (7.0, 1.0))),
                         seed=seed, dtype=np.float64)


class ConstDisc:
    """Stand-in discriminator with fixed outputs per call order."""

    def __init__(self, *outputs):
        self.outputs = list(outputs)

    def __call__(self, x, frozen=False):
        return Tensor(np.asarray(self.outputs.pop(0), dtype=np.float64))


class TestExtractUnits:
    def test_count(self):
        assert ak.extract_units(np.zeros((5, 8, 8))).shape == (64, 5, 3, 3)

    def test_single_cell(self):
        u = ak.extract_units(np.full((1, 1, 1), 7.0))
        expected = np.zeros((1, 1, 3, 3))
        expected[0, 0, 1, 1] = 7.0
        np.testing.assert_array_equal(u, expected)

    def test_corner_has_four_ones(self):
        u = ak.extract_units(np.ones((1, 4, 4)))
        assert u[0].sum() == 4 and (u[0] == 0).sum() == 5

    def test_conv_receptive_field_is_the_unit(self):
        # first-layer response of D_f at a cell equals the kernel applied to that cell's unit
        rng = np.random.default_rng(0)
        fm = rng.normal(size=(3, 5, 5))
        d = ak.FeatureDiscriminator(3, hidden=4, dtype=np.float64)
        w, b = d.params["conv0.weight"].data, d.params["conv0.bias"].data
        out = nk.conv2d(Tensor(fm[None]), Tensor(w), Tensor(b), padding=1).data[0]
        units = ak.extract_units(fm)
        ref = np.einsum("uchw,ochw->ou", units, w) + b[:, None]
        np.testing.assert_allclose(out.reshape(4, -1), ref, atol=1e-12)


class TestFeatureAlignment:
    def test_blind_values(self):
        d = blind(ak.FeatureDiscriminator(6, dtype=np.float64))
        rng = np.random.default_rng(1)
        dis, ext = ak.feature_alignment_losses(Tensor(rng.normal(size=(2, 6, 4, 4))),
                                               Tensor(rng.normal(size=(2, 6, 4, 4))), d)
        assert abs(dis.item() - 2 * LN2) <= 1e-9
        assert abs(ext.item() - LN2) <= 1e-9

    def test_perfect_discriminator_saturates_finitely(self):
        dis = ak.discriminator_loss(ConstDisc([1.0, 1.0], [0.0, 0.0]), Tensor(np.zeros(2)), Tensor(np.zeros(2)))
        ext = ak.generator_loss(ConstDisc([0.0, 0.0]), Tensor(np.zeros(2)))
        assert dis.item() == pytest.approx(-2 * math.log(1 - PROB_EPS), abs=1e-12)
        assert ext.item() == pytest.approx(-math.log(PROB_EPS))
        assert math.isfinite(ext.item())

    def test_gradient_routing(self):
        m = tiny_model()
        d = ak.FeatureDiscriminator(6, hidden=8, seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        xs, xt = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
        every = m.parameters() + d.parameters()

        dis, _ = ak.feature_alignment_losses(m.features(xs), m.features(xt), d)
        nk.backward(dis, every)
        assert all(not p.grad.any() for p in m.parameters())
        assert any(p.grad.any() for p in d.parameters())

        m.zero_grad()
        d.zero_grad()
        _, ext = ak.feature_alignment_losses(m.features(xs), m.features(xt), d)
        nk.backward(ext, every)
        assert all(not p.grad.any() for p in d.parameters())
        assert any(p.grad.any() for p in m.parameters())


class TestPredictionVectors:
    def test_length_and_softmax(self):
        v = ak.build_prediction_vectors(Tensor(np.ones((1, 3, 4))), Tensor(np.zeros((1, 3, 2))))
        assert v.shape == (1, 3, 6)
        np.testing.assert_array_equal(v.data[0, :, 4:], 0.5)
        np.testing.assert_array_equal(v.data[0, :, :4], 1.0)

    def test_desk_scale_count(self):
        _, loc, conf = DetectorModel()(np.zeros((1, 3, 64, 64)))
        assert ak.build_prediction_vectors(loc, conf).shape == (1, 128, 6)

    def test_raw_option(self):
        v = ak.build_prediction_vectors(Tensor(np.zeros((2, 4))), Tensor(np.full((2, 2), 3.0)), apply_softmax=False)
        np.testing.assert_array_equal(v.data[:, 4:], 3.0)


class TestPredictionAlignment:
    def test_blind_values(self):
        d = blind(ak.PredictionDiscriminator(dtype=np.float64))
        rng = np.random.default_rng(3)
        dis, det = ak.prediction_alignment_losses(Tensor(rng.normal(size=(10, 6))), Tensor(rng.normal(size=(7, 6))), d)
        assert abs(dis.item() - 2 * LN2) <= 1e-9
        assert abs(det.item() - LN2) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1 - 1e-3))
    def test_identical_batches_bounded_below(self, q):
        # same input on both sides means D answers the same q on each
        dis = ak.discriminator_loss(ConstDisc([q], [q]), Tensor(np.zeros(1)), Tensor(np.zeros(1)))
        assert dis.item() >= 2 * LN2 - 1e-12

    def test_detector_loss_reaches_extractor_and_head_not_disc(self):
        m = tiny_model()
        d = ak.PredictionDiscriminator(hidden=8, seed=1, dtype=np.float64)
        rng = np.random.default_rng(4)
        _, ls, cs = m(rng.uniform(size=(1, 3, 16, 16)))
        _, lt, ct = m(rng.uniform(size=(1, 3, 16, 16)))
        _, det = ak.prediction_alignment_losses(ak.build_prediction_vectors(ls, cs),
                                                ak.build_prediction_vectors(lt, ct), d)
        nk.backward(det, m.parameters() + d.parameters())
        assert all(not p.grad.any() for p in d.parameters())
        assert np.abs(m.params["backbone.0.weight"].grad).sum() > 0
        assert np.abs(m.params["head.loc.weight"].grad).sum() > 0

    def test_detector_loss_grad_check(self):
        m = tiny_model(seed=3)
        d = ak.PredictionDiscriminator(hidden=8, seed=2, dtype=np.float64)
        img = np.random.default_rng(5).uniform(size=(1, 3, 16, 16))

        def loss():
            _, loc, conf = m(img)
            return ak.generator_loss(d, ak.build_prediction_vectors(loc, conf))

        assert nk.grad_check(loss, m.parameters(), max_coords=5) <= 1e-3


class TestClassWeights:
    @staticmethod
    def conf_with_counts(n0, n1):
        return np.r_[np.tile([0.9, 0.1], (n0, 1)), np.tile([0.2, 0.8], (n1, 1))]

    @pytest.mark.parametrize("counts, a, expected", [
        ((50, 50), (1, 1), (1.0, 1.0)),
        ((90, 10), (1, 1), (0.5556, 5.0)),
        ((90, 10), (3, 1), (1.6667, 5.0)),
    ])
    def test_examples(self, counts, a, expected):
        b = ak.compute_class_weights(self.conf_with_counts(*counts), a, 2)
        np.testing.assert_allclose(b, expected, atol=5e-5)

    def test_allocation_lookup(self):
        conf = np.array([[0.1, 0.9], [0.8, 0.2], [0.7, 0.3]])
        np.testing.assert_array_equal(ak.allocate_weights(np.array([0.5, 2.0]), conf), [2, 0.5, 0.5])

    def test_all_background(self):
        cw = ak.class_weight_normalization(self.conf_with_counts(40, 0), (1, 1))
        np.testing.assert_array_equal(cw.weights, 0.5)
        assert cw.class_weights[1] == 0.0

    def test_argmax_tie_goes_to_background(self):
        cw = ak.class_weight_normalization(np.array([[0.5, 0.5], [0.2, 0.8]]), (1, 1))
        assert cw.counts.tolist() == [1, 1]

    def test_rejects_non_positive_a(self):
        with pytest.raises(ValueError):
            ak.compute_class_weights(np.ones((2, 2)), (0, 1))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 60), st.integers(0, 10_000),
           st.lists(st.floats(0.1, 10), min_size=3, max_size=3))
    def test_sum_invariant(self, n_classes_minus2, n, seed, a):
        c = n_classes_minus2 % 2 + 2
        rng = np.random.default_rng(seed)
        conf = rng.dirichlet(np.ones(c), size=n)
        cw = ak.class_weight_normalization(conf, a[:c])
        assert cw.counts.sum() == n
        present = cw.counts > 0
        assert abs(cw.weights.sum() - n / c * np.sum(np.asarray(a[:c])[present])) <= 1e-9

    def test_scaling_a_scales_weights(self):
        conf = np.random.default_rng(6).dirichlet((1, 1), size=30)
        w1 = ak.class_weight_normalization(conf, (3, 1)).weights
        w2 = ak.class_weight_normalization(conf, (6, 2)).weights
        np.testing.assert_allclose(w2, 2 * w1, rtol=1e-12)


class TestWeightedLosses:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.src = Tensor(rng.normal(size=(12, 6)))
        self.tgt = Tensor(rng.normal(size=(9, 6)))
        self.d = ak.PredictionDiscriminator(hidden=8, seed=3, dtype=np.float64)

    def test_unit_weights_neutral(self):
        plain = ak.prediction_alignment_losses(self.src, self.tgt, self.d)
        weighted = ak.weighted_alignment_losses(self.src, self.tgt, self.d, np.ones(9), np.ones(12))
        for p, w in zip(plain, weighted):
            assert abs(p.item() - w.item()) <= 1e-12

    def test_linearity(self):
        plain = ak.prediction_alignment_losses(self.src, self.tgt, self.d)
        weighted = ak.weighted_alignment_losses(self.src, self.tgt, self.d, np.full(9, 2.0), np.full(12, 2.0))
        for p, w in zip(plain, weighted):
            assert w.item() == pytest.approx(2 * p.item(), rel=1e-12)

    def test_hand_example(self):
        det = ak.generator_loss(ConstDisc([0.9, 0.5]), Tensor(np.zeros((2, 6))), np.array([0.0, 2.0]))
        assert det.item() == pytest.approx(LN2, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ak.weighted_alignment_losses(self.src, self.tgt, self.d, np.ones(8))
        with pytest.raises(ValueError):
            ak.weighted_alignment_losses(self.src, self.tgt, self.d, np.ones(9), np.ones(3))

    def test_scaling_a_scales_losses(self):
        conf_t = nk.softmax(Tensor(self.tgt.data[:, 4:])).data
        w1 = ak.class_weight_normalization(conf_t, (3, 1)).weights
        w2 = ak.class_weight_normalization(conf_t, (6, 2)).weights
        l1 = ak.weighted_alignment_losses(self.src, self.tgt, self.d, w1)[1].item()
        l2 = ak.weighted_alignment_losses(self.src, self.tgt, self.d, w2)[1].item()
        assert l2 == pytest.approx(2 * l1, rel=1e-12)

    def test_weights_carry_no_gradient(self):
        # analytic gradient matches finite differences taken with W held fixed
        m = tiny_model(seed=4)
        img = np.random.default_rng(8).uniform(size=(1, 3, 16, 16))
        _, _, conf = m(img)
        w = ak.class_weight_normalization(nk.softmax(conf).data, (3, 1)).weights

        def loss():
            _, loc, logits = m(img)
            return ak.generator_loss(self.d, ak.build_prediction_vectors(loc, logits), w)

        # small step keeps the differences clear of relu kinks
        assert nk.grad_check(loss, m.parameters(), eps=1e-6, max_coords=5) <= 1e-3
