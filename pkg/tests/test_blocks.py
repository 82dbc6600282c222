import numpy as np
import pytest

from clearstream import blocks as B
from clearstream import tensor as T
from conftest import gradcheck


def _zero_params(block):
    for _, p in block.params():
        p.data = np.zeros_like(p.data)


class TestConvNextBlock:
    def test_zero_branch_is_identity(self):
        rng = np.random.default_rng(0)
        blk = B.ConvNextBlock(rng, 5)
        _zero_params(blk)
        x = T.Tensor(np.random.default_rng(1).standard_normal((2, 5, 6, 6)))
        out = blk(x)
        assert np.array_equal(out.data, x.data)

    def test_shape_stable(self):
        rng = np.random.default_rng(2)
        for shape in [(1, 3, 8, 8), (2, 7, 5, 9), (1, 1, 12, 4)]:
            blk = B.ConvNextBlock(rng, shape[1])
            x = T.Tensor(rng.standard_normal(shape).astype(np.float32))
            assert blk(x).shape == shape

    def test_gradients(self):
        with T.using_dtype("float64"):
            rng = np.random.default_rng(3)
            blk = B.ConvNextBlock(rng, 3)
            x = T.Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True,
                         dtype=np.float64)
            wrt = [x] + [p for _, p in blk.params()]
            err = gradcheck(lambda: T.mean_all(T.mul(blk(x), blk(x))), wrt)
            assert err < 1e-4


class TestDownsample:
    def test_spatial_arithmetic_64_to_4(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.standard_normal((1, 4, 64, 64)).astype(np.float32))
        for _ in range(4):
            ds = B.Downsample(rng, 4, 4)
            x = ds(x)
        assert x.shape == (1, 4, 4, 4)

    def test_channel_progression_small_preset(self):
        rng = np.random.default_rng(5)
        dims = [28, 36, 48, 64]
        x = T.Tensor(rng.standard_normal((1, 28, 32, 32)).astype(np.float32))
        seen = []
        for cin, cout in zip(dims[:-1], dims[1:]):
            x = B.Downsample(rng, cin, cout)(x)
            seen.append(x.shape[1])
        assert seen == [36, 48, 64]

    def test_zero_input_gives_bias_only(self):
        rng = np.random.default_rng(6)
        ds = B.Downsample(rng, 3, 5)
        ds.conv.b.data = np.arange(5, dtype=np.float32)
        out = ds(T.Tensor(np.zeros((1, 3, 8, 8))))
        for o in range(5):
            assert np.allclose(out.data[:, o], float(o))

    def test_odd_spatial_dims_rejected(self):
        rng = np.random.default_rng(7)
        ds = B.Downsample(rng, 3, 5)
        x = T.Tensor(np.zeros((1, 3, 7, 8)))
        out = ds(x)
        # 2x2 stride-2 conv floors odd dims; the model never feeds odd sizes,
        # but the block itself stays shape-consistent
        assert out.shape == (1, 5, 3, 4)


class TestMixerBlock:
    def test_zero_mlps_is_identity(self):
        rng = np.random.default_rng(8)
        blk = B.MixerBlock(rng, tokens=6, dim=4, hidden=5)
        _zero_params(blk)
        x = T.Tensor(np.random.default_rng(9).standard_normal((2, 6, 4)))
        assert np.array_equal(blk(x).data, x.data)

    def test_shape_preserved(self):
        rng = np.random.default_rng(10)
        blk = B.MixerBlock(rng, tokens=9, dim=7, hidden=11)
        x = T.Tensor(rng.standard_normal((3, 9, 7)).astype(np.float32))
        assert blk(x).shape == (3, 9, 7)

    def test_channel_mixing_is_token_equivariant(self):
        rng = np.random.default_rng(11)
        blk = B.MixerBlock(rng, tokens=5, dim=6, hidden=8)
        # silence the token-mixing path so only channel mixing remains
        blk.tm2.w.data = np.zeros_like(blk.tm2.w.data)
        blk.tm2.b.data = np.zeros_like(blk.tm2.b.data)
        x = rng.standard_normal((1, 5, 6)).astype(np.float32)
        perm = np.random.default_rng(12).permutation(5)
        out_then_perm = blk(T.Tensor(x)).data[:, perm]
        perm_then_out = blk(T.Tensor(x[:, perm])).data
        assert np.allclose(out_then_perm, perm_then_out, atol=1e-6)

    def test_token_mixing_row_column_duality(self):
        rng = np.random.default_rng(13)
        blk = B.MixerBlock(rng, tokens=7, dim=1, hidden=4)
        vec = rng.standard_normal(7).astype(np.float32)
        tokens = T.Tensor(vec.reshape(1, 7, 1))
        mixed = blk.mix_tokens(tokens).data.reshape(7)
        plain = blk.tm2(T.gelu(blk.tm1(T.Tensor(vec)))).data
        assert np.allclose(mixed, plain, atol=1e-6)

    def test_gradients_through_stacked_depth_4(self):
        with T.using_dtype("float64"):
            rng = np.random.default_rng(14)
            stack = [B.MixerBlock(rng, tokens=3, dim=2, hidden=3) for _ in range(4)]
            x = T.Tensor(rng.standard_normal((1, 3, 2)), requires_grad=True,
                         dtype=np.float64)
            wrt = [x] + [p for blk in stack for _, p in blk.params()]

            def loss():
                h = x
                for blk in stack:
                    h = blk(h)
                return T.mean_all(T.mul(h, h))

            assert gradcheck(loss, wrt) < 1e-4


class TestPatchEmbed:
    def test_token_count_matches_pixels(self):
        rng = np.random.default_rng(15)
        pe = B.PatchEmbed(rng, embed=8)
        frame = T.Tensor(rng.standard_normal((2, 3, 6, 5)).astype(np.float32))
        out = pe(frame)
        assert out.shape == (2, 6, 5, 8)


class TestDecoderStage:
    def test_doubles_spatial(self):
        rng = np.random.default_rng(16)
        st = B.DecoderStage(rng, 6, 4)
        x = T.Tensor(rng.standard_normal((1, 6, 5, 7)).astype(np.float32))
        assert st(x).shape == (1, 4, 10, 14)

    def test_final_stage_gives_three_channels_unactivated(self):
        rng = np.random.default_rng(17)
        st = B.DecoderStage(rng, 4, 3, final=True)
        st.w.data = np.zeros_like(st.w.data)
        st.b.data = np.array([0.2, -0.4, 0.9], dtype=np.float32)
        out = st(T.Tensor(np.random.default_rng(18).standard_normal((1, 4, 3, 3))
                          .astype(np.float32)))
        assert out.shape == (1, 3, 6, 6)
        # negative bias survives: no activation applied
        assert np.allclose(out.data[0, 1], -0.4)

    def test_four_stages_upsample_24_to_384(self):
        rng = np.random.default_rng(19)
        chans = [8, 6, 5, 4, 3]
        x = T.Tensor(np.zeros((1, 8, 24, 24), dtype=np.float32))
        for i in range(4):
            st = B.DecoderStage(rng, chans[i], chans[i + 1], final=(i == 3))
            x = st(x)
        assert x.shape == (1, 3, 384, 384)

    def test_zero_input_zero_bias_gives_zero(self):
        rng = np.random.default_rng(20)
        st = B.DecoderStage(rng, 3, 3, final=True)
        out = st(T.Tensor(np.zeros((1, 3, 4, 4))))
        assert np.array_equal(out.data, np.zeros((1, 3, 8, 8), dtype=np.float32))

    def test_gradients(self):
        with T.using_dtype("float64"):
            rng = np.random.default_rng(21)
            st = B.DecoderStage(rng, 3, 2)
            x = T.Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True,
                         dtype=np.float64)
            wrt = [x] + [p for _, p in st.params()]
            assert gradcheck(lambda: T.mean_all(T.mul(st(x), st(x))), wrt) < 1e-4


class TestInit:
    def test_trunc_normal_bounded_and_seeded(self):
        rng = np.random.default_rng(22)
        a = B.trunc_normal(rng, (1000,), std=0.02)
        assert np.abs(a).max() <= 0.04 + 1e-9
        b = B.trunc_normal(np.random.default_rng(22), (1000,), std=0.02)
        assert np.array_equal(a, b)
