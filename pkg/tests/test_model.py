"""Model tests: diff stack, fusion reductions, block shapes, end-to-end contracts."""

import numpy as np
import pytest

from pulseforge import layers as L
from pulseforge import model as M
from pulseforge import tensor as T
from pulseforge.gradcheck import run_model_check

MICRO = dict(frames=16, height=12, width=12, stem_channels=4, stage1_channels=6, stage2_channels=8)


def micro_arch(**over):
    cfg = dict(MICRO)
    cfg.update(over)
    return M.ArchConfig(**cfg)


class TestDiffStack:
    def test_constant_clip_is_zero(self):
        clip = np.full((3, 5, 4, 4), 0.4, dtype=np.float64)
        out = M.make_diff_stack(clip).numpy()
        assert out.shape == (12, 5, 4, 4)
        np.testing.assert_array_equal(out, 0.0)

    def test_linear_ramp_interior_is_one(self):
        t = 6
        clip = np.broadcast_to(
            np.arange(t, dtype=np.float64)[None, :, None, None], (3, t, 2, 2)
        ).copy()
        out = M.make_diff_stack(clip).numpy()
        # interior frames see slope-1 differences on all four diff groups
        np.testing.assert_array_equal(out[:, 2 : t - 2], 1.0)

    def test_matches_indexing_oracle(self):
        rng = np.random.default_rng(0)
        clip = rng.random((3, 7, 3, 3))
        out = M.make_diff_stack(clip).numpy()
        t_len = 7
        expect = np.zeros((12, t_len, 3, 3))
        for t in range(t_len):
            cl = lambda k: clip[:, min(max(t + k, 0), t_len - 1)]
            expect[0:3, t] = cl(-1) - cl(-2)
            expect[3:6, t] = cl(0) - cl(-1)
            expect[6:9, t] = cl(1) - cl(0)
            expect[9:12, t] = cl(2) - cl(1)
        np.testing.assert_array_equal(out, expect)

    def test_boundary_differences_are_zero(self):
        rng = np.random.default_rng(1)
        out = M.make_diff_stack(rng.random((3, 5, 2, 2))).numpy()
        np.testing.assert_array_equal(out[0:3, 0], 0.0)  # D'_{-2} needs t-2
        np.testing.assert_array_equal(out[9:12, -1], 0.0)  # D'_{2} needs t+2

    def test_short_clip_rejected(self):
        with pytest.raises(T.ShapeError):
            M.make_diff_stack(np.zeros((3, 2, 4, 4)))

    def test_batched(self):
        rng = np.random.default_rng(2)
        clip = rng.random((2, 3, 5, 4, 4))
        out = M.make_diff_stack(clip).numpy()
        assert out.shape == (2, 12, 5, 4, 4)
        np.testing.assert_array_equal(out[1], M.make_diff_stack(clip[1]).numpy())


class TestFusionStem:
    def test_alpha_one_beta_zero_reduces_to_raw_chain(self):
        arch = micro_arch(alpha_fuse=1.0, beta_fuse=0.0)
        w = M.init_weights(arch, seed=3, dtype=np.float64)
        rng = np.random.default_rng(4)
        clip = T.tensor(rng.random((1, 3, 16, 12, 12)))
        diff = M.make_diff_stack(clip)
        got = M.fusion_stem(clip, diff, w.fusion, mode="eval").numpy()
        raw = M._run_stem(clip, w.fusion.stem11, "eval")
        expect = M._run_stem(raw, w.fusion.stem21, "eval").numpy()
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_constant_clip_matches_hand_composition(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=5, dtype=np.float64)
        clip = T.tensor(np.full((1, 3, 16, 12, 12), 0.3))
        diff = M.make_diff_stack(clip)
        np.testing.assert_array_equal(diff.numpy(), 0.0)
        got = M.fusion_stem(clip, diff, w.fusion, mode="eval").numpy()
        a, b = w.fusion.alpha_fuse, w.fusion.beta_fuse
        i_raw = M._run_stem(clip, w.fusion.stem11, "eval")
        i_diff = M._run_stem(diff, w.fusion.stem12, "eval")
        inner = T.add(T.scale(i_raw, a), T.scale(i_diff, b))
        expect = (
            a * M._run_stem(i_raw, w.fusion.stem21, "eval").numpy()
            + b * M._run_stem(inner, w.fusion.stem22, "eval").numpy()
        )
        np.testing.assert_allclose(got, expect, atol=1e-12)

    def test_shape_contract_spatial_dims_preserved(self):
        arch = M.ArchConfig(frames=8, height=72, width=72, stem_channels=8,
                            stage1_channels=6, stage2_channels=8)
        w = M.init_weights(arch, seed=6)
        clip = T.tensor(np.random.default_rng(7).random((1, 3, 8, 72, 72), dtype=np.float32))
        out = M.fusion_stem(clip, M.make_diff_stack(clip), w.fusion, mode="eval")
        assert out.shape == (1, 8, 8, 72, 72)


class TestStasBlock:
    def test_stage_shapes(self):
        arch = M.ArchConfig(frames=8, height=36, width=36, stem_channels=4,
                            stage1_channels=6, stage2_channels=8)
        w = M.init_weights(arch, seed=8)
        x = T.tensor(np.random.default_rng(9).random((1, 4, 8, 36, 36), dtype=np.float32))
        z1 = M.stas_block(x, w.stas1, mode="eval")
        assert z1.shape == (1, 6, 8, 18, 18)  # spatial pool only
        z2 = M.stas_block(z1, w.stas2, mode="eval")
        assert z2.shape == (1, 8, 4, 9, 9)  # spatiotemporal pool

    def test_matches_hand_chained_layers(self):
        arch = micro_arch(dropout_rate=0.3)
        w = M.init_weights(arch, seed=10, dtype=np.float64)
        x = T.tensor(np.random.default_rng(11).random((1, 4, 8, 8, 8)))

        got = M.stas_block(x, w.stas1, mode="train", rng=np.random.default_rng(42)).numpy()

        s = w.stas1
        bn_copy = L.BatchNormParams(
            gamma=s.bn.gamma,
            beta=s.bn.beta,
            running_mean=np.zeros_like(s.bn.running_mean),
            running_var=np.ones_like(s.bn.running_var),
        )
        z = T.relu(L.batchnorm3d(L.conv3d(L.temporal_shift(x), s.conv), bn_copy, mode="train"))
        z = L.attention_mask(z, s.attention, s.post_shift_conv)
        z = L.maxpool3d(z, s.pool_window)
        z = L.dropout(z, s.dropout_rate, mode="train", rng=np.random.default_rng(42))
        np.testing.assert_allclose(got, z.numpy(), atol=1e-12)

    def test_divisibility_violation(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=12)
        x = T.tensor(np.zeros((1, 4, 7, 6, 6), dtype=np.float32))  # T=7 resists (2,2,2) pool
        with pytest.raises(T.ShapeError):
            M.stas_block(x, w.stas2, mode="eval")


class TestUdfHead:
    @pytest.mark.parametrize("t", [16, 64, 128])
    def test_output_length_equals_clip_length(self, t):
        arch = micro_arch(frames=t)
        w = M.init_weights(arch, seed=13)
        x = T.tensor(np.random.default_rng(14).random((1, 8, t // 2, 3, 3), dtype=np.float32))
        out = M.udf_head(x, w.udf)
        assert out.shape == (1, t)

    def test_zero_features_zero_bias_gives_zero_waveform(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=15)
        x = T.tensor(np.zeros((1, 8, 8, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(M.udf_head(x, w.udf).numpy(), 0.0)

    def test_matches_hand_composition(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=16, dtype=np.float64)
        x = np.random.default_rng(17).random((1, 8, 8, 3, 3))
        got = M.udf_head(T.tensor(x), w.udf).numpy()
        up = np.repeat(x, 2, axis=2)
        from tests.test_layers import conv3d_loop_oracle

        conv = conv3d_loop_oracle(
            up, w.udf.temporal_conv.weight.numpy(), w.udf.temporal_conv.bias.numpy(),
            (1, 1, 1), (1, 0, 0),
        )
        feat = conv.mean(axis=(3, 4))  # (1, C, T)
        expect = (feat.transpose(0, 2, 1) @ w.udf.mlp_weight.numpy())[..., 0] + w.udf.mlp_bias.numpy()[0]
        np.testing.assert_allclose(got, expect, atol=1e-10)


class TestForward:
    def test_shape_and_eval_determinism(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=18)
        clip = np.random.default_rng(19).random((3, 16, 12, 12), dtype=np.float32)
        out1 = M.forward(clip, w, mode="eval").numpy()
        out2 = M.forward(clip, w, mode="eval").numpy()
        assert out1.shape == (16,)
        np.testing.assert_array_equal(out1, out2)

    def test_default_spatial_dims_waveform_length(self):
        arch = M.ArchConfig(frames=128, height=72, width=72, stem_channels=4,
                            stage1_channels=6, stage2_channels=8)
        w = M.init_weights(arch, seed=20)
        clip = np.random.default_rng(21).random((3, 128, 72, 72), dtype=np.float32)
        assert M.forward(clip, w, mode="eval").shape == (128,)

    def test_wrong_clip_shape_rejected(self):
        w = M.init_weights(micro_arch(), seed=22)
        with pytest.raises(T.ShapeError):
            M.forward(np.zeros((3, 16, 16, 16), dtype=np.float32), w, mode="eval")

    def test_temporal_reversal_changes_output(self):
        arch = micro_arch()
        w = M.init_weights(arch, seed=23)
        clip = np.random.default_rng(24).random((3, 16, 12, 12), dtype=np.float32)
        fwd = M.forward(clip, w, mode="eval").numpy()
        rev = M.forward(clip[:, ::-1].copy(), w, mode="eval").numpy()
        assert np.max(np.abs(fwd - rev)) > 1e-6

    def test_beta_zero_forward_ignores_diff_branch(self):
        arch = micro_arch(alpha_fuse=1.0, beta_fuse=0.0)
        w = M.init_weights(arch, seed=25, dtype=np.float64)
        clip = T.tensor(np.random.default_rng(26).random((1, 3, 16, 12, 12)))
        real_diff = M.make_diff_stack(clip)
        zero_diff = T.tensor(np.zeros_like(real_diff.numpy()))
        a = M.fusion_stem(clip, real_diff, w.fusion, mode="eval").numpy()
        b = M.fusion_stem(clip, zero_diff, w.fusion, mode="eval").numpy()
        np.testing.assert_array_equal(a, b)

    def test_gradient_of_mean_output_wrt_weight_slice(self):
        row = run_model_check(seed=0, tol=1e-3)
        assert row.passed, f"rel err {row.rel_err:.2e}"

    def test_train_mode_requires_rng_with_dropout(self):
        arch = micro_arch(dropout_rate=0.5)
        w = M.init_weights(arch, seed=27)
        clip = np.zeros((3, 16, 12, 12), dtype=np.float32)
        with pytest.raises(ValueError):
            M.forward(clip, w, mode="train")


class TestParamCount:
    def test_micro_hand_count(self):
        arch = micro_arch()  # cs=4, c1=6, c2=8
        w = M.init_weights(arch, seed=28)
        # stems: conv + bias + bn(gamma,beta)
        expect = (4 * 3 * 25 + 4 + 8) + (4 * 12 * 25 + 4 + 8) + 2 * (4 * 4 * 27 + 4 + 8)
        # stas1: conv 6x4x27 (+6 bias, 12 bn), attn 6+1, post 6x6x9+6
        expect += 6 * 4 * 27 + 6 + 12 + 7 + (6 * 6 * 9 + 6)
        expect += 8 * 6 * 27 + 8 + 16 + 9 + (8 * 8 * 9 + 8)
        expect += 8 * 8 * 3 + 8  # temporal conv
        expect += 8 + 1  # linear decoder
        assert M.param_count(w) == expect

    def test_doubling_stem_channels_doubles_stem11(self):
        def stem11_params(cs):
            arch = micro_arch(stem_channels=cs)
            w = M.init_weights(arch, seed=29)
            stem = w.fusion.stem11
            return stem.conv.weight.size + stem.conv.bias.size + stem.bn.gamma.size + stem.bn.beta.size

        assert stem11_params(8) == 2 * stem11_params(4)

    def test_default_config_matches_closed_form_and_budget(self):
        arch = M.ArchConfig()
        w = M.init_weights(arch, seed=30)
        runtime = M.param_count(w)
        closed = M.param_count_closed_form(arch)
        assert runtime == closed
        assert runtime < 1_500_000

    def test_no_attention_variant_counts(self):
        arch = micro_arch(use_attention=False)
        w = M.init_weights(arch, seed=31)
        assert M.param_count(w) == M.param_count_closed_form(arch)
        assert M.param_count(w) < M.param_count_closed_form(micro_arch())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        arch = micro_arch()
        w = M.init_weights(arch, seed=32)
        # make running stats non-trivial
        clip = np.random.default_rng(33).random((3, 16, 12, 12), dtype=np.float32)
        M.forward(clip, w, mode="train", rng=np.random.default_rng(0))
        p = tmp_path / "model.ckpt"
        M.save_checkpoint(p, w, seed=32, epoch=7)
        w2, manifest = M.load_checkpoint(p)
        assert manifest["epoch"] == "7"
        for (n1, p1), (n2, p2) in zip(w.named_parameters(), w2.named_parameters()):
            assert n1 == n2
            assert p1.data.tobytes() == p2.data.tobytes()
        for (n1, b1), (n2, b2) in zip(w.named_buffers(), w2.named_buffers()):
            assert b1.tobytes() == b2.tobytes()
        out1 = M.forward(clip, w, mode="eval").numpy()
        out2 = M.forward(clip, w2, mode="eval").numpy()
        np.testing.assert_array_equal(out1, out2)

    def test_arch_mismatch_detected(self, tmp_path):
        w = M.init_weights(micro_arch(), seed=34)
        p = tmp_path / "model.ckpt"
        M.save_checkpoint(p, w, seed=34, epoch=0)
        raw = bytearray(p.read_bytes())
        # corrupt the manifest's stem_channels value
        idx = raw.find(b"stem_channels=4")
        raw[idx : idx + 15] = b"stem_channels=5"
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            M.load_checkpoint(p)

    def test_arch_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            M.ArchConfig.from_dict({"frames": 16, "bogus": 1})

    def test_arch_validation(self):
        with pytest.raises(ValueError):
            M.ArchConfig(frames=6).validate()
        with pytest.raises(ValueError):
            M.ArchConfig(height=70).validate()
