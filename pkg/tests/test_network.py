import numpy as np
import pytest

from mbhx import fileio, network
from mbhx.autodiff import Tensor
from mbhx.errors import ConfigError
from mbhx.network import ModelConfig, forward, init_weights, model_config, parameter_count


def sep(a, b):
    return 9 * a + a * b + b


def closed_form_count(c, shared):
    enc = 27 * c + c
    for cin, cout in ((c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)):
        enc += sep(cin, cout) + 2 * sep(cout, cout)
    dec = sep(12 * c, 4 * c) + sep(6 * c, 2 * c) + sep(2 * c + 3, c)
    heads = (9 * c + 1) * 1 + (9 * c + 1) * 3
    return enc * (1 if shared else 2) + 2 * dec + heads


def images(n=1, extent=(64, 64), seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, *extent)).astype(np.float32)


class TestShapes:
    def test_output_shapes(self):
        cfg = model_config(4)
        alpha, fg = forward(init_weights(cfg, 0), cfg, images())
        assert alpha.shape == (1, 1, 64, 64)
        assert fg.shape == (1, 3, 64, 64)

    @pytest.mark.parametrize("model_id", [1, 2])
    def test_resolution_schedule(self, model_id):
        cfg = model_config(model_id)
        probes = {}
        forward(init_weights(cfg, 0), cfg, images(), probes)
        assert [probes[f"enc_1/{d}"][2:] for d in (2, 4, 8, 16)] == [(32, 32), (16, 16), (8, 8), (4, 4)]
        for branch in ("dec_alpha", "dec_fg"):
            assert [probes[f"{branch}_1/{d}"][2:] for d in (4, 2, 1)] == [(16, 16), (32, 32), (64, 64)]
        assert probes["enc_1/16"][1] == 128

    def test_non_square_extent(self):
        cfg = ModelConfig(input_extent=(32, 48), base_channels=4)
        alpha, fg = forward(init_weights(cfg, 0), cfg, images(2, (32, 48)))
        assert alpha.shape == (2, 1, 32, 48) and fg.shape == (2, 3, 32, 48)

    @pytest.mark.parametrize("extent", [(48, 40), (24, 32)])
    def test_extent_not_divisible_by_16(self, extent):
        cfg = ModelConfig(base_channels=4)
        with pytest.raises(ConfigError, match="16"):
            forward(init_weights(cfg, 0), cfg, images(1, extent))

    def test_config_rejects_bad_extent(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_extent=(40, 64))

    def test_unknown_model_id(self):
        with pytest.raises(ConfigError):
            model_config(5)


class TestOutputs:
    def test_strictly_inside_unit_interval(self):
        cfg = ModelConfig(base_channels=8)
        w = init_weights(cfg, 3)
        for name, p in w.params.items():
            if name.endswith("head.b"):
                p.data[:] = 60.0 if "alpha" in name else -60.0
        alpha, fg = forward(w, cfg, images())
        assert alpha.data.min() > 0 and alpha.data.max() < 1
        assert fg.data.min() > 0 and fg.data.max() < 1

    def test_fresh_network_is_not_saturated(self):
        cfg = model_config(4)
        for seed in range(4):
            alpha, _ = forward(init_weights(cfg, seed), cfg, images(seed=seed))
            assert 0.05 < alpha.data.mean() < 0.95

    def test_sharing_toggle_identical_at_init(self):
        x = images(2, seed=5)
        shared, separate = model_config(2), model_config(1)
        a1, f1 = forward(init_weights(shared, 11), shared, x)
        a2, f2 = forward(init_weights(separate, 11), separate, x)
        assert np.array_equal(a1.data, a2.data)
        assert np.array_equal(f1.data, f2.data)


class TestInit:
    def test_deterministic_in_seed(self):
        cfg = model_config(1, 8)
        a, b = init_weights(cfg, 7).arrays(), init_weights(cfg, 7).arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = init_weights(cfg, 8).arrays()
        assert not np.array_equal(a["enc.entry.w"], c["enc.entry.w"])

    def test_biases_are_zero(self):
        for name, arr in init_weights(model_config(3), 1).arrays().items():
            if name.endswith(".b"):
                assert not arr.any(), name

    def test_dense_kernel_variance(self):
        arrays = init_weights(model_config(4), 0, dtype=np.float64).arrays()
        checked = 0
        for name, arr in arrays.items():
            if arr.size < 10_000 or name.endswith((".b", ".dw")):
                continue
            fan_in = np.prod(arr.shape[1:])
            assert abs(arr.var() / (2.0 / fan_in) - 1) < 0.2, name
            checked += 1
        assert checked >= 4

    def test_depthwise_kernel_variance(self):
        arrays = init_weights(model_config(4, 64), 0, dtype=np.float64).arrays()
        pooled = np.concatenate([v.ravel() for k, v in arrays.items() if k.endswith(".dw")])
        assert pooled.size >= 10_000
        assert abs(pooled.var() / (1.0 / 9) - 1) < 0.2

    def test_float64_init_matches_float32(self):
        cfg = model_config(2, 8)
        a = init_weights(cfg, 2, dtype=np.float64).arrays()
        b = init_weights(cfg, 2, dtype=np.float32).arrays()
        assert all(np.array_equal(a[k].astype(np.float32), b[k]) for k in a)


class TestParameters:
    @pytest.mark.parametrize("c", [8, 16])
    @pytest.mark.parametrize("model_id", [1, 2, 3, 4])
    def test_closed_form_count(self, c, model_id):
        cfg = model_config(model_id, c)
        assert parameter_count(init_weights(cfg, 0)) == closed_form_count(c, cfg.share_encoder)

    def test_desk_model_size(self):
        assert parameter_count(init_weights(model_config(4), 0)) == 98378

    def test_sharing_reduces_parameters(self):
        assert parameter_count(init_weights(model_config(1), 0)) > parameter_count(init_weights(model_config(2), 0))

    def test_shared_encoder_is_the_same_object(self):
        w = init_weights(model_config(2), 0)
        alpha_enc, fg_enc = w.encoder("alpha"), w.encoder("fg")
        assert alpha_enc.keys() == fg_enc.keys()
        assert all(alpha_enc[k] is fg_enc[k] for k in alpha_enc)

    def test_separate_encoder_is_a_copy(self):
        w = init_weights(model_config(1), 0)
        alpha_enc, fg_enc = w.encoder("alpha"), w.encoder("fg")
        assert all(alpha_enc[k] is not fg_enc[k] for k in alpha_enc)
        assert all(np.array_equal(alpha_enc[k].data, fg_enc[k].data) for k in alpha_enc)

    def test_count_survives_checkpoint(self, tmp_path):
        cfg = model_config(3, 8)
        w = init_weights(cfg, 0)
        fileio.save_checkpoint(tmp_path / "m.ckpt", w.arrays(), {"config": cfg.to_dict()})
        arrays, header = fileio.load_checkpoint(tmp_path / "m.ckpt")
        restored = network.NetworkWeights.from_arrays(ModelConfig.from_dict(header["config"]), arrays)
        assert parameter_count(restored) == parameter_count(w)

    def test_from_arrays_rejects_mismatch(self):
        arrays = init_weights(model_config(2, 8), 0).arrays()
        arrays.pop("enc.entry.b")
        with pytest.raises(ConfigError):
            network.NetworkWeights.from_arrays(model_config(2, 8), arrays)

    def test_gradients_reach_every_parameter(self):
        from mbhx import autodiff as ad
        cfg = ModelConfig(base_channels=4, input_extent=(16, 16))
        w = init_weights(cfg, 0, dtype=np.float64)
        alpha, fg = forward(w, cfg, Tensor(images(1, (16, 16)).astype(np.float64)))
        ad.backward(ad.add(ad.sum_all(alpha), ad.sum_all(fg)))
        for name, p in w.params.items():
            assert p.grad is not None and np.abs(p.grad).sum() > 0, name
