import numpy as np
import pytest

from cloudseg.checkpoint import load_params, save_params
from cloudseg.errors import ArgumentError, FormatError, ShapeError
from cloudseg.network import (
    NetworkConfig,
    build_model,
    cbrr_forward,
    count_parameters,
    decoder_forward,
    describe,
    encoder_forward,
    fusion_forward,
    model_backward,
    model_forward,
    named_parameters,
    named_tensors,
    receptive_field,
)


def tiny_config(**kw):
    base = dict(in_channels=3, filters=4)
    base.update(kw)
    return NetworkConfig(**base)


def rand_input(shape, seed=0):
    return np.random.Generator(np.random.PCG64(seed)).random(shape, dtype=np.float32)


class TestConfig:
    def test_scalar_filters_broadcast(self):
        cfg = NetworkConfig(filters=16)
        assert cfg.filters == (16,) * 6

    def test_default_dilations(self):
        cfg = NetworkConfig()
        assert cfg.encoder_dilations == (1, 1, 1, 1, 2, 4)
        assert cfg.decoder_dilations == (4, 2, 1, 1, 1, 1)
        assert cfg.out_channels == 2

    def test_filter_sweep_accepted(self):
        cfg = NetworkConfig(filters=(64, 128, 256, 512, 512, 512))
        assert cfg.filters[-1] == 512

    def test_bad_lengths_rejected(self):
        with pytest.raises(ArgumentError):
            NetworkConfig(filters=(64, 64))
        with pytest.raises(ArgumentError):
            NetworkConfig(encoder_dilations=(1, 1))

    def test_unknown_dict_keys_rejected(self):
        with pytest.raises(ArgumentError):
            NetworkConfig.from_dict({"in_channels": 3, "depth": 9})


class TestBuildModel:
    def test_deterministic_per_seed(self):
        a = build_model(tiny_config(), seed=5)
        b = build_model(tiny_config(), seed=5)
        for (na, ta), (nb, tb) in zip(named_tensors(a), named_tensors(b)):
            assert na == nb and ta.tobytes() == tb.tobytes()

    def test_different_seed_differs(self):
        a = build_model(tiny_config(), seed=5)
        b = build_model(tiny_config(), seed=6)
        assert a.encoder[0].convs[0].weights.tobytes() != \
            b.encoder[0].convs[0].weights.tobytes()

    def test_first_conv_shape_default_config(self):
        params = build_model(NetworkConfig(in_channels=4), seed=0)
        assert params.encoder[0].convs[0].weights.shape == (64, 4, 3, 3)

    def test_bias_zero_gamma_one(self):
        params = build_model(tiny_config(), seed=1)
        assert not params.head_conv.bias.any()
        bn = params.encoder[0].bns[0]
        assert np.all(bn.gamma == 1) and not bn.beta.any()
        assert not bn.running_mean.any() and np.all(bn.running_var == 1)

    def test_parameter_count_against_shape_sum_oracle(self):
        # enumerate every tensor the default config declares and sum sizes
        cfg = NetworkConfig(in_channels=4)
        f = 64

        def conv_sz(cin, cout, r):
            return cout * cin * r * r + cout

        def bn_learnable(c):
            return 2 * c

        def block(cin, cout, project):
            total = conv_sz(cin, cout, 3) + conv_sz(cout, cout, 3) \
                + conv_sz(cout, cout, 3) + 3 * bn_learnable(cout)
            if project:
                total += conv_sz(cin, cout, 1) + bn_learnable(cout)
            return total

        expected = block(4, f, True) + 5 * block(f, f, False)      # encoder
        expected += 6 * block(f, f, False)                         # decoder
        expected += 3 * conv_sz(f, f, 3)                           # updec deconvs
        expected += 3 * conv_sz(f, f, 16) + conv_sz(f, f, 8) + conv_sz(f, f, 4)
        expected += conv_sz(6 * f, 2, 3)                           # fusion head
        learnable, total = count_parameters(build_model(cfg, seed=0))
        assert learnable == expected
        # running stats add 2 extra vectors per BN (37 BN layers incl. proj)
        assert total == expected + 2 * (37 * f)

    def test_describe_matches_checkpoint_total(self, tmp_path):
        params = build_model(tiny_config(), seed=3)
        _, total = count_parameters(params)
        save_params(params, tmp_path / "m.ckpt")
        reloaded = load_params(tmp_path / "m.ckpt")
        assert sum(a.size for _, a in named_tensors(reloaded)) == total


class TestBlock:
    def test_no_residual_equals_plain_stack(self):
        cfg = tiny_config(residual_enabled=False)
        params = build_model(cfg, seed=2)
        bp = params.encoder[1]  # channel-matched block
        x = rand_input((2, 4, 8, 8), seed=1)
        y_plain, _ = cbrr_forward(x, bp, False, "eval")
        # manually: conv-bn-relu x2 then conv-bn, final relu
        from cloudseg.layers import batchnorm_forward, conv2d_forward, relu_forward
        t = x
        for i in range(2):
            t = relu_forward(batchnorm_forward(conv2d_forward(t, bp.convs[i]),
                                               bp.bns[i], "eval")[0])
        t = batchnorm_forward(conv2d_forward(t, bp.convs[2]), bp.bns[2], "eval")[0]
        assert np.allclose(y_plain, relu_forward(t), atol=1e-6)

    def test_zero_weights_residual_passthrough(self):
        cfg = tiny_config()
        params = build_model(cfg, seed=2)
        bp = params.encoder[1]
        for conv in bp.convs:
            conv.weights[...] = 0
        x = rand_input((1, 4, 8, 8), seed=2) - 0.5
        y, _ = cbrr_forward(x, bp, True, "eval")
        assert np.allclose(y, np.maximum(x, 0), atol=1e-6)

    def test_spatial_preserved(self):
        params = build_model(tiny_config(filters=8), seed=0)
        x = rand_input((1, 3, 32, 32))
        y, _ = cbrr_forward(x, params.encoder[0], True, "eval")
        assert y.shape == (1, 8, 32, 32)


class TestEncoderDecoder:
    def test_encoder_scales(self):
        params = build_model(tiny_config(), seed=0)
        outs, _ = encoder_forward(rand_input((1, 3, 256, 256)), params, "eval")
        assert [o.shape[2] for o in outs] == [256, 128, 64, 32, 32, 32]

    def test_indivisible_dims_rejected(self):
        params = build_model(tiny_config(), seed=0)
        with pytest.raises(ShapeError):
            encoder_forward(rand_input((1, 3, 250, 250)), params, "eval")

    def test_dilation_wired_per_block(self):
        params = build_model(tiny_config(), seed=0)
        assert [b.convs[0].dilation for b in params.encoder] == [1, 1, 1, 1, 2, 4]
        assert [b.convs[0].dilation for b in params.decoder] == [4, 2, 1, 1, 1, 1]

    def test_pyramid_scales_mirror_encoder(self):
        params = build_model(tiny_config(), seed=0)
        x = rand_input((1, 3, 256, 256))
        outs, _ = encoder_forward(x, params, "eval")
        pyramid, _ = decoder_forward(outs, params, "eval")
        assert [p.shape[2] for p in pyramid] == [32, 32, 32, 64, 128, 256]

    def test_zero_decoder_pyramid_equals_encoder_outputs(self):
        # with residuals off and every decoder/upsampler weight zeroed, each
        # pyramid entry is exactly the skip contribution
        cfg = tiny_config(residual_enabled=False)
        params = build_model(cfg, seed=4)
        for bp in params.decoder:
            for conv in bp.convs:
                conv.weights[...] = 0
                conv.bias[...] = 0
        for up in params.upsamplers:
            up.weights[...] = 0
            up.bias[...] = 0
        x = rand_input((1, 3, 32, 32), seed=5)
        outs, _ = encoder_forward(x, params, "eval")
        pyramid, _ = decoder_forward(outs, params, "eval")
        for i, p in enumerate(pyramid):
            assert np.allclose(p, outs[5 - i], atol=1e-6)


class TestFusion:
    def test_concat_width_default(self):
        params = build_model(NetworkConfig(in_channels=3, filters=64), seed=0)
        x = rand_input((1, 3, 64, 64))
        outs, _ = encoder_forward(x, params, "eval")
        pyramid, _ = decoder_forward(outs, params, "eval")
        y, cat = fusion_forward(pyramid, params, "train")
        assert cat.shape[1] == 384
        assert y.shape == (1, 2, 64, 64)

    def test_fusion_disabled_head_reads_d1(self):
        cfg = tiny_config(fusion_enabled=False)
        params = build_model(cfg, seed=1)
        assert params.fusion_ups == []
        assert params.head_conv.weights.shape == (2, 4, 3, 3)
        y, _ = model_forward(rand_input((1, 3, 32, 32)), params, "eval")
        assert y.shape == (1, 2, 32, 32)

    def test_ablation_layer_inventory(self):
        full = [r[0] for r in describe(build_model(tiny_config(), seed=0))]
        nofuse = [r[0] for r in describe(
            build_model(tiny_config(fusion_enabled=False), seed=0))]
        nores = describe(build_model(tiny_config(residual_enabled=False), seed=0))
        assert any(k.startswith("fup") for k in full)
        assert not any(k.startswith("fup") for k in nofuse)
        assert all("residual" not in row[2] for row in nores if row[1] == "block")


class TestModel:
    def test_output_shape_256(self):
        params = build_model(NetworkConfig(in_channels=4, filters=8), seed=0)
        y, _ = model_forward(rand_input((1, 4, 256, 256)), params, "eval")
        assert y.shape == (1, 2, 256, 256)

    def test_eval_forward_pure_and_deterministic(self):
        params = build_model(tiny_config(), seed=0)
        x = rand_input((1, 3, 32, 32), seed=1)
        y1, c1 = model_forward(x, params, "eval")
        y2, c2 = model_forward(x, params, "eval")
        assert c1 is None and c2 is None
        assert y1.tobytes() == y2.tobytes()

    def test_channel_mismatch_rejected(self):
        params = build_model(tiny_config(), seed=0)
        with pytest.raises(ShapeError):
            model_forward(rand_input((1, 5, 32, 32)), params, "eval")

    def test_backward_covers_every_parameter(self):
        params = build_model(tiny_config(), seed=0)
        x = rand_input((2, 3, 16, 16))
        y, cache = model_forward(x, params, "train")
        gs = model_backward(cache, np.ones_like(y))
        names = {n for n, _ in named_parameters(params)}
        assert set(gs.params) == names
        for n, g in gs.params.items():
            assert np.isfinite(g).all(), n
        assert gs.d_input.shape == x.shape

    def test_filter_sweep_forward(self):
        cfg = NetworkConfig(in_channels=3, filters=(4, 6, 8, 10, 10, 10))
        params = build_model(cfg, seed=0)
        y, cache = model_forward(rand_input((1, 3, 32, 32)), params, "train")
        assert y.shape == (1, 2, 32, 32)
        gs = model_backward(cache, np.ones_like(y))
        assert all(np.isfinite(g).all() for g in gs.params.values())

    def test_translation_covariance_interior(self):
        # a circular 8-px shift commutes with the network exactly for pixels
        # whose receptive cone (radius ~401 px) avoids the wrapped borders
        params = build_model(tiny_config(), seed=11)
        x = rand_input((1, 3, 824, 824), seed=12)
        y, _ = model_forward(x, params, "eval")
        xs = np.roll(x, (8, 8), axis=(2, 3))
        ys, _ = model_forward(xs, params, "eval")
        y_shifted = np.roll(y, (8, 8), axis=(2, 3))
        diff = np.abs(ys - y_shifted)[:, :, 410:-402, 410:-402]
        assert diff.max() < 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        params = build_model(tiny_config(), seed=9)
        path = tmp_path / "model.ckpt"
        save_params(params, path)
        reloaded = load_params(path)
        for (na, ta), (nb, tb) in zip(named_tensors(params), named_tensors(reloaded)):
            assert na == nb and ta.tobytes() == tb.tobytes()
        assert reloaded.config == params.config

    def test_truncated_file_rejected(self, tmp_path):
        params = build_model(tiny_config(), seed=9)
        path = tmp_path / "model.ckpt"
        save_params(params, path)
        blob = path.read_bytes()
        for cut in (2, 7, 40, len(blob) - 100):
            (tmp_path / "trunc.ckpt").write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                load_params(tmp_path / "trunc.ckpt")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(FormatError):
            load_params(path)

    def test_manifest_shape_mismatch_rejected(self, tmp_path):
        import json
        import struct
        params = build_model(tiny_config(), seed=9)
        path = tmp_path / "model.ckpt"
        save_params(params, path)
        blob = path.read_bytes()
        (mlen,) = struct.unpack("<I", blob[5:9])
        manifest = json.loads(blob[9:9 + mlen])
        manifest["tensors"][0]["shape"] = [1, 2, 3]
        raw = json.dumps(manifest).encode()
        (tmp_path / "bad.ckpt").write_bytes(
            blob[:5] + struct.pack("<I", len(raw)) + raw + blob[9 + mlen:]
        )
        with pytest.raises(FormatError):
            load_params(tmp_path / "bad.ckpt")

    def test_trailing_bytes_rejected(self, tmp_path):
        params = build_model(tiny_config(), seed=9)
        path = tmp_path / "model.ckpt"
        save_params(params, path)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError):
            load_params(tmp_path / "fat.ckpt")


class TestReceptiveField:
    @pytest.mark.parametrize("depth,expected", [(1, 3), (2, 5), (3, 7)])
    def test_basic(self, depth, expected):
        assert receptive_field(depth, "basic") == expected

    @pytest.mark.parametrize("depth,expected", [(1, 3), (2, 7), (3, 15)])
    def test_dilated_doubling(self, depth, expected):
        assert receptive_field(depth, "dilated-doubling") == expected

    def test_depth_zero_rejected(self):
        with pytest.raises(ArgumentError):
            receptive_field(0, "basic")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ArgumentError):
            receptive_field(1, "linear")
