import colorsys
import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.fft

from clearstream.degrade import (Clip, DegradationSpec, _DCT, bilinear_resize,
                                 color_jitter, compress_blockdct, degrade_clip,
                                 gaussian_blur, hsv_to_rgb, parse_spec,
                                 quant_table, rgb_to_hsv, sample_spec,
                                 serialize_spec)
from clearstream.errors import DataError, SpecRangeError


def rand_frame(rng, h=16, w=16, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, (3, h, w)).astype(np.float32)


def identity_spec(**overrides):
    base = dict(blur_enabled=False, isotropic=True, sigma_x=1.0, sigma_y=1.0,
                angle=0.0, kernel_size=15, resample_enabled=False,
                resample_factor=2.0, noise_enabled=False, noise_amp=0.05,
                noise_seed=7, compress_enabled=False, quality=90,
                jitter_enabled=False, brightness=1.0, contrast=1.0,
                saturation=1.0, hue=0.0)
    base.update(overrides)
    return DegradationSpec(**base)


class TestSampleSpec:
    def test_same_seed_identical(self):
        assert sample_spec(1234) == sample_spec(1234)
        assert sample_spec(1) != sample_spec(2)

    def test_ranges_and_forced_stage(self):
        for seed in range(2000):
            s = sample_spec(seed)
            assert 0.1 <= s.sigma_x <= 3.0
            assert 0.1 <= s.sigma_y <= 3.0
            assert 0.0 <= s.angle <= math.pi
            assert s.kernel_size == 15
            assert 0.8 <= s.resample_factor <= 2.5
            assert 0.0 <= s.noise_amp <= 0.1
            assert 70 <= s.quality <= 100
            for v in (s.brightness, s.contrast, s.saturation):
                assert 0.8 <= v <= 1.1
            assert -0.05 <= s.hue <= 0.05
            assert s.stage_mask != 0
            if s.isotropic:
                assert s.sigma_x == s.sigma_y

    def test_isotropic_fraction(self):
        iso = sum(sample_spec(seed).isotropic for seed in range(10_000))
        assert abs(iso / 10_000 - 0.5) <= 0.02

    def test_enable_rate_per_stage(self):
        # forcing a stage when all five come up disabled shifts each rate up
        # by at most (1/2)^5 / 5, well inside this band
        count = 3000
        on = np.zeros(5)
        for seed in range(count):
            s = sample_spec(seed)
            on += [s.blur_enabled, s.resample_enabled, s.noise_enabled,
                   s.compress_enabled, s.jitter_enabled]
        assert np.all(np.abs(on / count - 0.5) < 0.05)

    def test_validation_rejects_out_of_range(self):
        with pytest.raises(SpecRangeError):
            identity_spec(sigma_x=5.0).validate()
        with pytest.raises(SpecRangeError):
            identity_spec(resample_factor=0.5).validate()
        with pytest.raises(SpecRangeError):
            identity_spec(noise_amp=0.2).validate()
        with pytest.raises(SpecRangeError):
            identity_spec(quality=50).validate()
        with pytest.raises(SpecRangeError):
            identity_spec(hue=0.2).validate()
        with pytest.raises(SpecRangeError):
            identity_spec(kernel_size=14).validate()


def naive_blur(frame, kernel):
    """Dense reflect-padded 2-D convolution, plain loops."""
    size = kernel.shape[0]
    r = size // 2
    x = np.asarray(frame, dtype=np.float64)
    padded = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
    out = np.zeros_like(x)
    for c in range(3):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                out[c, i, j] = (padded[c, i:i + size, j:j + size] * kernel).sum()
    return out


class TestGaussianBlur:
    def test_constant_frame_unchanged(self):
        frame = np.full((3, 12, 12), 0.37, dtype=np.float32)
        for sigma in (0.5, (1.0, 2.0, 0.6)):
            out = gaussian_blur(frame, sigma)
            assert np.allclose(out, 0.37, atol=1e-6)

    def test_tiny_sigma_is_near_identity(self):
        rng = np.random.default_rng(0)
        frame = rand_frame(rng, 20, 20)
        out = gaussian_blur(frame, 0.1)
        assert np.abs(out - frame).max() < 1e-2

    def test_separable_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        frame = rand_frame(rng, 12, 10)
        sigma = 1.3
        r = 7
        x = np.arange(-r, r + 1, dtype=np.float64)
        taps = np.exp(-0.5 * (x / sigma) ** 2)
        taps /= taps.sum()
        kernel = np.outer(taps, taps)
        want = naive_blur(frame, kernel)
        got = gaussian_blur(frame, sigma)
        assert np.abs(got - want).max() < 1e-6

    def test_anisotropic_with_equal_sigmas_matches_isotropic(self):
        rng = np.random.default_rng(2)
        frame = rand_frame(rng, 14, 14)
        iso = gaussian_blur(frame, 1.7)
        aniso = gaussian_blur(frame, (1.7, 1.7, 0.9))
        assert np.abs(iso - aniso).max() < 1e-6

    def test_anisotropic_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        frame = rand_frame(rng, 11, 13)
        sx, sy, ang = 2.0, 0.6, 0.8
        r = 7
        coords = np.arange(-r, r + 1, dtype=np.float64)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        u = math.cos(ang) * xx + math.sin(ang) * yy
        v = -math.sin(ang) * xx + math.cos(ang) * yy
        kernel = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        kernel /= kernel.sum()
        want = naive_blur(frame, kernel)
        got = gaussian_blur(frame, (sx, sy, ang))
        assert np.abs(got - want).max() < 1e-6

    def test_isotropic_commutes_with_rotation(self):
        rng = np.random.default_rng(4)
        frame = rand_frame(rng, 16, 16)
        a = gaussian_blur(np.rot90(frame, axes=(1, 2)).copy(), 1.2)
        b = np.rot90(gaussian_blur(frame, 1.2), axes=(1, 2))
        assert np.abs(a - b).max() < 1e-6

    def test_sigma_out_of_range_rejected(self):
        frame = np.zeros((3, 8, 8), dtype=np.float32)
        with pytest.raises(SpecRangeError):
            gaussian_blur(frame, 0.05)
        with pytest.raises(SpecRangeError):
            gaussian_blur(frame, (1.0, 3.5, 0.0))


def naive_resize(frame, out_h, out_w):
    x = np.asarray(frame, dtype=np.float64)
    _, h, w = x.shape
    out = np.zeros((3, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = x[:, y0, x0] * (1 - fx) + x[:, y0, x1] * fx
            bot = x[:, y1, x0] * (1 - fx) + x[:, y1, x1] * fx
            out[:, i, j] = top * (1 - fy) + bot * fy
    return out


class TestBilinearResize:
    def test_same_size_is_identity(self):
        rng = np.random.default_rng(0)
        frame = rand_frame(rng, 9, 7)
        assert np.array_equal(bilinear_resize(frame, 9, 7), frame)

    def test_constant_frame_stays_constant(self):
        frame = np.full((3, 10, 6), 0.42, dtype=np.float32)
        for h, w in [(5, 3), (20, 12), (7, 11)]:
            out = bilinear_resize(frame, h, w)
            assert out.shape == (3, h, w)
            assert np.allclose(out, 0.42, atol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        for (h, w), (oh, ow) in [((7, 5), (13, 9)), ((16, 16), (10, 21)),
                                 ((8, 12), (3, 3))]:
            frame = rand_frame(rng, h, w)
            got = bilinear_resize(frame, oh, ow)
            want = naive_resize(frame, oh, ow)
            assert np.abs(got - want).max() < 1e-6


class TestCompressBlockDCT:
    def test_dct_matrix_matches_scipy(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=8)
        assert np.allclose(_DCT @ v, scipy.fft.dct(v, norm="ortho"),
                           atol=1e-12)
        block = rng.normal(size=(8, 8))
        mine = _DCT @ block @ _DCT.T
        want = scipy.fft.dctn(block, norm="ortho")
        assert np.allclose(mine, want, atol=1e-12)

    def test_dct_matrix_orthonormal(self):
        assert np.allclose(_DCT @ _DCT.T, np.eye(8), atol=1e-12)

    def test_quant_table_hand_values(self):
        assert np.array_equal(quant_table(50), np.maximum(
            np.round(quant_table(50)), 1))
        # scale 100 reproduces the base table: floor((16*100+50)/100) = 16
        assert quant_table(50)[0, 0] == 16
        # quality 100 clamps every entry to the floor of 1
        assert np.all(quant_table(100) == 1)
        # quality 70 -> scale 60: floor((16*60+50)/100) = 10
        assert quant_table(70)[0, 0] == 10
        assert quant_table(70)[7, 7] == math.floor((99 * 60 + 50) / 100)

    def test_quality_bounds(self):
        frame = np.zeros((3, 8, 8), dtype=np.float32)
        for bad in (0, 101, 70.5):
            with pytest.raises(SpecRangeError):
                compress_blockdct(frame, bad)

    def test_constant_frame_roundtrips_within_dc_rounding(self):
        frame = np.full((3, 16, 16), 0.53, dtype=np.float32)
        out = compress_blockdct(frame, 70)
        # DC quantization step 10 bounds the error by 10/2/8 on 0..255 scale
        assert np.abs(out - frame).max() <= 10 / 2 / 8 / 255 + 1e-6
        assert np.allclose(out, out[:, :1, :1], atol=1e-6)

    def test_quality_100_near_lossless(self):
        rng = np.random.default_rng(1)
        frame = rand_frame(rng, 32, 32)
        out = compress_blockdct(frame, 100)
        mse = float(((out - frame) ** 2).mean())
        psnr = 10 * math.log10(1.0 / mse)
        assert psnr > 45.0

    def test_quality_monotonicity(self):
        rng = np.random.default_rng(2)
        frame = rand_frame(rng, 32, 32)

        def psnr_at(q):
            out = compress_blockdct(frame, q)
            return 10 * math.log10(1.0 / float(((out - frame) ** 2).mean()))

        assert psnr_at(70) < psnr_at(95)
        assert not np.array_equal(compress_blockdct(frame, 70),
                                  compress_blockdct(frame, 95))

    def test_non_multiple_of_eight_sizes(self):
        rng = np.random.default_rng(3)
        frame = rand_frame(rng, 13, 21)
        out = compress_blockdct(frame, 80)
        assert out.shape == frame.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestColorJitter:
    def test_identity_factors(self):
        rng = np.random.default_rng(0)
        frame = rand_frame(rng)
        out = color_jitter(frame, 1.0, 1.0, 1.0, 0.0)
        assert np.abs(out - frame).max() < 1e-6

    def test_brightness_scales_constant_frame(self):
        frame = np.full((3, 8, 8), 0.5, dtype=np.float32)
        out = color_jitter(frame, 0.8, 1.0, 1.0, 0.0)
        assert np.allclose(out, 0.4, atol=1e-6)

    def test_zero_saturation_gives_grayscale(self):
        rng = np.random.default_rng(1)
        frame = rand_frame(rng)
        out = color_jitter(frame, 1.0, 1.0, 0.0, 0.0)
        assert np.abs(out[0] - out[1]).max() < 1e-6
        assert np.abs(out[1] - out[2]).max() < 1e-6
        luma = (0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2])
        assert np.abs(out[0] - luma).max() < 1e-5

    def test_hsv_roundtrip(self):
        rng = np.random.default_rng(2)
        frame = rng.uniform(0, 1, (3, 6, 6))
        back = hsv_to_rgb(rgb_to_hsv(frame))
        assert np.abs(back - frame).max() < 1e-12

    def test_hsv_matches_colorsys(self):
        rng = np.random.default_rng(3)
        frame = rng.uniform(0, 1, (3, 5, 4))
        mine = rgb_to_hsv(frame)
        for i in range(5):
            for j in range(4):
                want = colorsys.rgb_to_hsv(*frame[:, i, j])
                assert np.allclose(mine[:, i, j], want, atol=1e-12)

    def test_hue_shift_matches_colorsys(self):
        rng = np.random.default_rng(4)
        frame = rng.uniform(0.05, 0.95, (3, 5, 4)).astype(np.float32)
        shift = 0.04
        got = color_jitter(frame, 1.0, 1.0, 1.0, shift)
        want = np.zeros_like(frame)
        for i in range(5):
            for j in range(4):
                h, s, v = colorsys.rgb_to_hsv(*frame[:, i, j].astype(float))
                want[:, i, j] = colorsys.hsv_to_rgb((h + shift) % 1.0, s, v)
        assert np.abs(got - want).max() < 1e-6

    def test_full_turn_hue_is_identity(self):
        rng = np.random.default_rng(5)
        frame = rand_frame(rng)
        out = color_jitter(frame, 1.0, 1.0, 1.0, 1.0)
        assert np.abs(out - frame).max() < 1e-6

    def test_contrast_blends_toward_mean_luminance(self):
        rng = np.random.default_rng(6)
        frame = rand_frame(rng)
        luma_mean = float((0.299 * frame[0] + 0.587 * frame[1]
                           + 0.114 * frame[2]).mean())
        out = color_jitter(frame, 1.0, 0.8, 1.0, 0.0)
        want = np.clip(luma_mean + 0.8 * (frame - luma_mean), 0, 1)
        assert np.abs(out - want).max() < 1e-6


class TestDegradeClip:
    def test_all_stages_off_is_identity(self):
        rng = np.random.default_rng(0)
        clip = Clip([rand_frame(rng) for _ in range(3)])
        out = degrade_clip(clip, identity_spec())
        for a, b in zip(out.frames, clip.frames):
            assert np.array_equal(a, b)
            assert a.dtype == np.float32

    def test_noise_only_mse_matches_amplitude(self):
        amp = 0.05
        frame = np.full((3, 64, 64), 0.5, dtype=np.float32)
        clip = Clip([frame])
        spec = identity_spec(noise_enabled=True, noise_amp=amp, noise_seed=11)
        out = degrade_clip(clip, spec)
        mse = float(((out.frames[0] - frame) ** 2).mean())
        assert abs(mse - amp ** 2) / amp ** 2 < 0.05

    def test_identical_frames_degrade_identically(self):
        rng = np.random.default_rng(1)
        frame = rand_frame(rng, 24, 24)
        clip = Clip([frame.copy(), frame.copy()])
        spec = sample_spec(99)
        out = degrade_clip(clip, spec)
        assert np.array_equal(out.frames[0], out.frames[1])

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(2)
        clip = Clip([rand_frame(rng, 24, 24) for _ in range(2)])
        spec = sample_spec(5)
        a = degrade_clip(clip, spec)
        b = degrade_clip(clip, spec)
        for fa, fb in zip(a.frames, b.frames):
            assert fa.tobytes() == fb.tobytes()

    def test_resolution_restored_after_resampling(self):
        rng = np.random.default_rng(3)
        clip = Clip([rand_frame(rng, 30, 22)])
        spec = identity_spec(resample_enabled=True, resample_factor=2.5)
        out = degrade_clip(clip, spec)
        assert out.frames[0].shape == (3, 30, 22)
        assert not np.array_equal(out.frames[0], clip.frames[0])

    def test_any_enabled_stage_changes_output(self):
        rng = np.random.default_rng(4)
        clip = Clip([rand_frame(rng, 24, 24)])
        for overrides in (dict(blur_enabled=True, sigma_x=2.0, sigma_y=2.0),
                          dict(resample_enabled=True),
                          dict(noise_enabled=True),
                          dict(compress_enabled=True, quality=70),
                          dict(jitter_enabled=True, brightness=0.9)):
            out = degrade_clip(clip, identity_spec(**overrides))
            assert not np.array_equal(out.frames[0], clip.frames[0])

    def test_output_stays_in_range(self):
        rng = np.random.default_rng(5)
        clip = Clip([rand_frame(rng, 24, 24) for _ in range(2)])
        for seed in range(20):
            out = degrade_clip(clip, sample_spec(seed))
            for f in out.frames:
                assert f.min() >= 0.0 and f.max() <= 1.0
                assert np.isfinite(f).all()

    def test_clip_validation(self):
        good = np.zeros((3, 8, 8), dtype=np.float32)
        bad = np.zeros((3, 8, 9), dtype=np.float32)
        with pytest.raises(DataError):
            degrade_clip(Clip([good, bad]), identity_spec())
        with pytest.raises(DataError):
            degrade_clip(Clip([]), identity_spec())


class TestSpecSerialization:
    def test_roundtrip(self):
        for seed in range(20):
            spec = sample_spec(seed)
            assert parse_spec(serialize_spec(spec)) == spec

    def test_stable_key_order(self):
        a = serialize_spec(sample_spec(0)).splitlines()
        b = serialize_spec(sample_spec(1)).splitlines()
        assert [x.split("=")[0] for x in a] == [y.split("=")[0] for y in b]

    def test_comments_and_blanks_tolerated(self):
        text = serialize_spec(sample_spec(3))
        padded = "# spec\n\n" + text + "\n# end\n"
        assert parse_spec(padded) == sample_spec(3)

    def test_unknown_key_rejected(self):
        text = serialize_spec(sample_spec(0)) + "mystery=1\n"
        with pytest.raises(DataError):
            parse_spec(text)

    def test_missing_key_rejected(self):
        lines = serialize_spec(sample_spec(0)).splitlines()
        with pytest.raises(DataError):
            parse_spec("\n".join(lines[1:]))

    def test_duplicate_key_rejected(self):
        text = serialize_spec(sample_spec(0))
        with pytest.raises(DataError):
            parse_spec(text + text.splitlines()[0] + "\n")

    def test_out_of_range_value_rejected(self):
        text = serialize_spec(sample_spec(0))
        bad = text.replace(f"quality={sample_spec(0).quality}", "quality=5")
        with pytest.raises(SpecRangeError):
            parse_spec(bad)
