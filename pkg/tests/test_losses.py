import numpy as np
import pytest

from mbhx import autodiff as ad
from mbhx import gradcheck
from mbhx.autodiff import Tensor
from mbhx.errors import ConfigError, ContractViolation
from mbhx.losses import (FeatureExtractor, LossWeights, alpha_absolute_loss, alpha_compositional_loss, assemble,
                         foreground_absolute_loss, perceptual_loss, total_loss)
from mbhx.network import ModelConfig


def unit(shape, seed=0):
    return np.random.default_rng(seed).uniform(size=shape)


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


@pytest.fixture(scope="module")
def extractor():
    return FeatureExtractor(dtype=np.float64)


class TestPixelLosses:
    def test_zero_at_ground_truth(self):
        a = unit((2, 1, 8, 8))
        f = unit((2, 3, 8, 8), 1)
        assert alpha_absolute_loss(a, a).item() == 0.0
        assert foreground_absolute_loss(f, f).item() == 0.0

    def test_all_ones_against_all_zeros(self):
        assert alpha_absolute_loss(np.ones((1, 1, 4, 4)), np.zeros((1, 1, 4, 4))).item() == 1.0

    def test_constant_offset(self):
        gt = unit((1, 3, 4, 4)) * 0.8
        assert foreground_absolute_loss(gt + 0.1, gt).item() == pytest.approx(0.1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            alpha_absolute_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


class TestCompositional:
    def test_zero_when_foreground_equals_background(self):
        f = unit((1, 3, 6, 6))
        assert alpha_compositional_loss(unit((1, 1, 6, 6), 1), unit((1, 1, 6, 6), 2), f, f).item() == 0.0

    def test_closed_form_for_constant_alpha_offset(self):
        f, b = unit((1, 3, 6, 6), 3), unit((1, 3, 6, 6), 4)
        gt = unit((1, 1, 6, 6), 5) * 0.5
        delta = 0.3
        got = alpha_compositional_loss(gt + delta, gt, f, b).item()
        assert got == pytest.approx(delta * np.abs(f - b).mean(), abs=1e-12)

    def test_incompatible_layers(self):
        with pytest.raises(ContractViolation):
            alpha_compositional_loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 4)),
                                     np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 5, 4)))


class TestPerceptual:
    def test_zero_at_ground_truth(self, extractor):
        x = unit((1, 3, 16, 16))
        assert perceptual_loss(extractor, x, x).item() == 0.0

    def test_non_negative(self, extractor):
        for seed in range(5):
            assert perceptual_loss(extractor, unit((1, 3, 16, 16), seed), unit((1, 3, 16, 16), seed + 9)).item() >= 0

    def test_shrinks_with_perturbation(self, extractor):
        gt = unit((1, 3, 32, 32), 1)
        direction = np.random.default_rng(2).standard_normal(gt.shape)
        losses = [perceptual_loss(extractor, gt + eps * direction, gt).item() for eps in (1e-1, 1e-2, 1e-3)]
        assert losses[0] > losses[1] > losses[2] > 0

    def test_single_channel_is_replicated(self, extractor):
        a, b = unit((1, 1, 16, 16)), unit((1, 1, 16, 16), 1)
        direct = perceptual_loss(extractor, np.repeat(a, 3, axis=1), np.repeat(b, 3, axis=1)).item()
        assert perceptual_loss(extractor, a, b).item() == direct

    def test_extractor_weights_stay_frozen(self, extractor):
        pred = T(unit((1, 3, 16, 16)), grad=True)
        ad.backward(perceptual_loss(extractor, pred, unit((1, 3, 16, 16), 1)))
        assert all(p.grad is None and not p.requires_grad for p in extractor.params.values())
        assert np.abs(pred.grad).sum() > 0

    def test_ground_truth_receives_no_gradient(self, extractor):
        gt = T(unit((1, 3, 16, 16), 1), grad=True)
        ad.backward(perceptual_loss(extractor, T(unit((1, 3, 16, 16)), grad=True), gt))
        assert gt.grad is None or not gt.grad.any()

    def test_extractor_is_fixed_by_seed(self):
        a, b = FeatureExtractor(), FeatureExtractor()
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    def test_save_load_roundtrip(self, tmp_path, extractor):
        extractor.save(tmp_path / "fx.ckpt")
        loaded = FeatureExtractor.load(tmp_path / "fx.ckpt", dtype=np.float64)
        assert all(np.array_equal(loaded.params[k].data, extractor.params[k].data) for k in loaded.params)

    def test_rejects_wrong_shapes(self):
        arrays = FeatureExtractor.random_arrays(0)
        arrays["block1.conv1.w"] = np.zeros((8, 3, 5, 5))
        with pytest.raises(ConfigError):
            FeatureExtractor(arrays)


class TestAssembly:
    ones = {k: T(1.0) for k in ("l_ab_a", "l_c_a", "l_p_a", "l_ab_f", "l_p_f")}

    def test_unit_components_with_perceptual(self):
        l_o, l_a, l_f = assemble(self.ones, LossWeights(), use_perceptual=True)
        assert abs(l_o.item() - 2.002) <= 1e-12
        assert abs(l_a.item() - 1.001) <= 1e-12
        assert abs(l_f.item() - 1.001) <= 1e-12

    def test_unit_components_without_perceptual(self):
        l_o, _, _ = assemble(self.ones, LossWeights(), use_perceptual=False)
        assert abs(l_o.item() - 2.0) <= 1e-12

    def test_perceptual_terms_ignored_when_off(self):
        terms = dict(self.ones, l_p_a=T(1e6), l_p_f=T(-3.0))
        assert assemble(terms, LossWeights(), use_perceptual=False)[0].item() == 2.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_c_alpha=-0.1)


class TestTotalLoss:
    def sample(self, extent=8):
        return {"alpha": unit((1, 1, extent, extent), 1), "fg": unit((1, 3, extent, extent), 2),
                "bg": unit((1, 3, extent, extent), 3)}

    def test_breakdown_without_perceptual(self):
        cfg = ModelConfig(use_perceptual=False, input_extent=(16, 16))
        s = self.sample()
        *_, parts = total_loss(LossWeights(), cfg, s, T(unit((1, 1, 8, 8), 4)), T(unit((1, 3, 8, 8), 5)), None)
        assert parts["l_p_a"] == parts["l_p_f"] == 0.0
        expected = 0.5 * parts["l_ab_a"] + 0.5 * parts["l_c_a"] + parts["l_ab_f"]
        assert parts["L_o"] == pytest.approx(expected, abs=1e-12)

    def test_perceptual_requires_extractor(self):
        with pytest.raises(ConfigError):
            total_loss(LossWeights(), ModelConfig(), self.sample(), T(unit((1, 1, 8, 8))), T(unit((1, 3, 8, 8))), None)

    def test_gradient_wrt_predictions(self, extractor):
        cfg = ModelConfig(input_extent=(16, 16))
        s = self.sample()

        def loss(pa, pf):
            return total_loss(LossWeights(), cfg, s, pa, pf, extractor)[0]

        res = gradcheck.check_gradients("total_loss", loss, [unit((1, 1, 8, 8), 6), unit((1, 3, 8, 8), 7)],
                                        np.random.default_rng(0), tolerance=1e-6)
        assert res.passed, res.line()
