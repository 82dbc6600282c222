"""Seeded synthetic degradation of clean clips.

One sampled spec governs a whole clip: every frame passes through the same
stage sequence with the same parameters, and the additive noise field is
drawn once per clip, so identical frames always degrade identically.  Stage
order is fixed: blur -> downsample -> noise -> block-DCT compression ->
color jitter -> resize back to the source resolution.

All stages are implemented directly on numpy arrays ([3,H,W] float32 in
[0,1]); nothing here depends on external image or codec libraries.
"""

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import DataError, SpecRangeError

STAGES = ("blur", "resample", "noise", "compress", "jitter")

SIGMA_RANGE = (0.1, 3.0)
FACTOR_RANGE = (0.8, 2.5)
NOISE_RANGE = (0.0, 0.1)
QUALITY_RANGE = (70, 100)
JITTER_RANGE = (0.8, 1.1)
HUE_RANGE = (-0.05, 0.05)
KERNEL_SIZE = 15

# standard luminance quantization table (row-major 8x8)
_QUANT_BASE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DegradationSpec:
    blur_enabled: bool
    isotropic: bool
    sigma_x: float
    sigma_y: float
    angle: float
    kernel_size: int
    resample_enabled: bool
    resample_factor: float
    noise_enabled: bool
    noise_amp: float
    noise_seed: int
    compress_enabled: bool
    quality: int
    jitter_enabled: bool
    brightness: float
    contrast: float
    saturation: float
    hue: float

    @property
    def stage_mask(self):
        bits = (self.blur_enabled, self.resample_enabled, self.noise_enabled,
                self.compress_enabled, self.jitter_enabled)
        return sum(1 << i for i, on in enumerate(bits) if on)

    def validate(self):
        def rng_check(name, value, lo, hi):
            if not (lo <= value <= hi):
                raise SpecRangeError(
                    f"{name}={value} outside [{lo}, {hi}]")

        rng_check("sigma_x", self.sigma_x, *SIGMA_RANGE)
        rng_check("sigma_y", self.sigma_y, *SIGMA_RANGE)
        rng_check("angle", self.angle, 0.0, math.pi)
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise SpecRangeError(
                f"kernel_size={self.kernel_size} must be odd and >= 3")
        rng_check("resample_factor", self.resample_factor, *FACTOR_RANGE)
        rng_check("noise_amp", self.noise_amp, *NOISE_RANGE)
        rng_check("quality", self.quality, *QUALITY_RANGE)
        if int(self.quality) != self.quality:
            raise SpecRangeError(f"quality={self.quality} must be integral")
        for name in ("brightness", "contrast", "saturation"):
            rng_check(name, getattr(self, name), *JITTER_RANGE)
        rng_check("hue", self.hue, *HUE_RANGE)
        if self.noise_seed < 0:
            raise SpecRangeError("noise_seed must be non-negative")
        return self


@dataclass
class Clip:
    frames: list
    fps: float = 30.0

    def validate(self):
        if not self.frames:
            raise DataError("clip has no frames")
        shape = self.frames[0].shape
        for i, f in enumerate(self.frames):
            if f.ndim != 3 or f.shape[0] != 3:
                raise DataError(f"frame {i} is not [3,H,W]: {f.shape}")
            if f.shape != shape:
                raise DataError(
                    f"frame {i} shape {f.shape} differs from {shape}")
        return self

    @property
    def resolution(self):
        return self.frames[0].shape[1:]


def sample_spec(rng_seed):
    """Draw one degradation spec; fully determined by the seed.

    Each stage is enabled independently with probability 0.5; if everything
    comes up disabled, one stage is forced on so a degraded clip is never a
    plain copy.  Parameter draws happen unconditionally in a fixed order so
    the mapping seed -> spec never depends on which stages are enabled.
    """
    rng = np.random.default_rng(rng_seed)
    enabled = rng.random(len(STAGES)) < 0.5
    forced = int(rng.integers(0, len(STAGES)))
    isotropic = bool(rng.random() < 0.5)
    sigma_x = float(rng.uniform(*SIGMA_RANGE))
    sigma_y = float(rng.uniform(*SIGMA_RANGE))
    angle = float(rng.uniform(0.0, math.pi))
    factor = float(rng.uniform(*FACTOR_RANGE))
    amp = float(rng.uniform(*NOISE_RANGE))
    quality = int(rng.integers(QUALITY_RANGE[0], QUALITY_RANGE[1] + 1))
    brightness = float(rng.uniform(*JITTER_RANGE))
    contrast = float(rng.uniform(*JITTER_RANGE))
    saturation = float(rng.uniform(*JITTER_RANGE))
    hue = float(rng.uniform(*HUE_RANGE))
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    if not enabled.any():
        enabled[forced] = True
    if isotropic:
        sigma_y = sigma_x
    return DegradationSpec(
        blur_enabled=bool(enabled[0]),
        isotropic=isotropic,
        sigma_x=sigma_x,
        sigma_y=sigma_y,
        angle=angle,
        kernel_size=KERNEL_SIZE,
        resample_enabled=bool(enabled[1]),
        resample_factor=factor,
        noise_enabled=bool(enabled[2]),
        noise_amp=amp,
        noise_seed=noise_seed,
        compress_enabled=bool(enabled[3]),
        quality=quality,
        jitter_enabled=bool(enabled[4]),
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        hue=hue,
    ).validate()


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------

def _gauss_taps(sigma, size):
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _aniso_kernel(sigma_x, sigma_y, angle, size):
    r = size // 2
    coords = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * xx + sa * yy
    v = -sa * xx + ca * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def gaussian_blur(frame, sigma, kernel_size=KERNEL_SIZE):
    """Normalized Gaussian blur with reflect padding.

    sigma is either a scalar (isotropic, applied separably) or a tuple
    (sigma_x, sigma_y, angle) for a rotated anisotropic kernel.
    """
    if np.isscalar(sigma):
        sigmas = (float(sigma), float(sigma))
    else:
        sigmas = (float(sigma[0]), float(sigma[1]))
    for s in sigmas:
        if not (SIGMA_RANGE[0] <= s <= SIGMA_RANGE[1]):
            raise SpecRangeError(f"blur sigma {s} outside {SIGMA_RANGE}")
    r = kernel_size // 2
    x = np.asarray(frame, dtype=np.float64)
    padded = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
    if np.isscalar(sigma):
        taps = _gauss_taps(float(sigma), kernel_size)
        rows = np.zeros((3,) + (x.shape[1], padded.shape[2]))
        for i, t in enumerate(taps):
            rows += t * padded[:, i:i + x.shape[1], :]
        out = np.zeros_like(x)
        for j, t in enumerate(taps):
            out += t * rows[:, :, j:j + x.shape[2]]
    else:
        sx, sy, angle = float(sigma[0]), float(sigma[1]), float(sigma[2])
        kern = _aniso_kernel(sx, sy, angle, kernel_size)
        out = np.zeros_like(x)
        for i in range(kernel_size):
            for j in range(kernel_size):
                out += kern[i, j] * padded[:, i:i + x.shape[1],
                                           j:j + x.shape[2]]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_resize(frame, out_h, out_w):
    """Half-pixel-aligned bilinear resampling of a [3,H,W] frame."""
    x = np.asarray(frame, dtype=np.float64)
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.astype(np.float32)

    def axis_coords(n_in, n_out):
        scale = n_in / n_out
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yf = axis_coords(h, out_h)
    xlo, xhi, xf = axis_coords(w, out_w)
    top = x[:, ylo, :] * (1.0 - yf)[None, :, None] \
        + x[:, yhi, :] * yf[None, :, None]
    out = top[:, :, xlo] * (1.0 - xf)[None, None, :] \
        + top[:, :, xhi] * xf[None, None, :]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# block-DCT compression emulation
# ---------------------------------------------------------------------------

def _dct_matrix():
    n = 8
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(math.pi * (2 * m + 1) * k / (2 * n))
    mat *= math.sqrt(2.0 / n)
    mat[0] *= math.sqrt(0.5)
    return mat


_DCT = _dct_matrix()


def quant_table(quality):
    """Scaled luminance table, conventional quality mapping, floor of 1."""
    if not (1 <= quality <= 100) or int(quality) != quality:
        raise SpecRangeError(f"quality={quality} outside [1, 100]")
    scale = 200 - 2 * quality if quality >= 50 else 5000 // quality
    tbl = np.floor((_QUANT_BASE * scale + 50) / 100)
    return np.maximum(tbl, 1.0)


def compress_blockdct(frame, quality):
    """8x8 block-DCT quantization, emulating codec blocking artifacts.

    Works per channel on the 0..255 scale with a -128 shift; edge blocks
    are completed by replication padding and cropped after the inverse.
    """
    tbl = quant_table(quality)
    x = np.asarray(frame, dtype=np.float64) * 255.0 - 128.0
    _, h, w = x.shape
    ph = (-h) % 8
    pw = (-w) % 8
    x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = x.shape[1:]
    blocks = x.reshape(3, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coeffs = np.einsum("ij,cbdjk,lk->cbdil", _DCT, blocks, _DCT)
    coeffs = np.round(coeffs / tbl) * tbl
    rec = np.einsum("ji,cbdjk,kl->cbdil", _DCT, coeffs, _DCT)
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(3, hh, ww)[:, :h, :w]
    return (((rec + 128.0) / 255.0).clip(0.0, 1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# color jitter
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def rgb_to_hsv(rgb):
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    v = maxc
    c = maxc - minc
    s = np.where(maxc > 0, c / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc,
                 np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(c > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(hsv):
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(frame, brightness, contrast, saturation, hue):
    """Brightness/contrast/saturation/hue adjustment, in that order.

    Contrast blends toward the frame's mean luminance; saturation blends
    toward per-pixel luminance (Rec.601 weights); hue rotates the HSV hue
    channel by ``hue`` turns.  Output is clamped to [0,1].
    """
    x = np.asarray(frame, dtype=np.float64)
    x = x * brightness
    luma = np.tensordot(_LUMA, x, axes=(0, 0))
    x = luma.mean() + contrast * (x - luma.mean())
    luma = np.tensordot(_LUMA, x, axes=(0, 0))
    x = luma[None] + saturation * (x - luma[None])
    x = x.clip(0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + hue) % 1.0
        x = hsv_to_rgb(hsv)
    return x.clip(0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _clamp(frame):
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def degrade_clip(clean, spec):
    """Apply one spec to every frame of a clip; returns a new Clip."""
    clean.validate()
    spec.validate()
    h, w = clean.resolution
    th, tw = h, w
    if spec.resample_enabled:
        th = max(1, round(h / spec.resample_factor))
        tw = max(1, round(w / spec.resample_factor))
    noise = None
    if spec.noise_enabled:
        field_rng = np.random.default_rng(spec.noise_seed)
        noise = field_rng.normal(0.0, spec.noise_amp, (3, th, tw))

    out = []
    for frame in clean.frames:
        x = frame
        if spec.blur_enabled:
            sigma = spec.sigma_x if spec.isotropic else \
                (spec.sigma_x, spec.sigma_y, spec.angle)
            x = _clamp(gaussian_blur(x, sigma, spec.kernel_size))
        if spec.resample_enabled:
            x = _clamp(bilinear_resize(x, th, tw))
        if spec.noise_enabled:
            x = _clamp(x + noise)
        if spec.compress_enabled:
            x = _clamp(compress_blockdct(x, spec.quality))
        if spec.jitter_enabled:
            x = color_jitter(x, spec.brightness, spec.contrast,
                             spec.saturation, spec.hue)
        if spec.resample_enabled:
            x = _clamp(bilinear_resize(x, h, w))
        out.append(np.asarray(x, dtype=np.float32))
    return Clip(out, clean.fps)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_BOOL_FIELDS = {"blur_enabled", "isotropic", "resample_enabled",
                "noise_enabled", "compress_enabled", "jitter_enabled"}
_INT_FIELDS = {"kernel_size", "noise_seed", "quality"}


def serialize_spec(spec):
    """Canonical key=value text block, one field per line, stable order."""
    lines = []
    for f in fields(DegradationSpec):
        v = getattr(spec, f.name)
        if f.name in _BOOL_FIELDS:
            lines.append(f"{f.name}={int(v)}")
        elif f.name in _INT_FIELDS:
            lines.append(f"{f.name}={int(v)}")
        else:
            lines.append(f"{f.name}={v!r}")
    return "\n".join(lines) + "\n"


def parse_spec(text):
    known = {f.name for f in fields(DegradationSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"spec line {lineno} is not key=value: {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise DataError(f"unknown spec key {key!r} on line {lineno}")
        if key in values:
            raise DataError(f"duplicate spec key {key!r} on line {lineno}")
        if key in _BOOL_FIELDS:
            values[key] = bool(int(val))
        elif key in _INT_FIELDS:
            values[key] = int(val)
        else:
            values[key] = float(val)
    missing = known - set(values)
    if missing:
        raise DataError(f"spec is missing keys: {sorted(missing)}")
    return DegradationSpec(**values).validate()
