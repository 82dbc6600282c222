"""Quality metrics, dataset evaluation, and latency benchmarking.

PSNR and SSIM are computed on RGB in float64.  Identical frames produce an
infinite PSNR; infinities are rendered as ``inf`` in reports and excluded
from means (with a diagnostic on stderr) so a lucky frame cannot poison an
aggregate.
"""

import math
import sys
import time
import tracemalloc
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import DataError, MetricError, PairingError, ShapeError, UsageError
from .runtime import enhance_stream

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_frame(x):
    arr = x.data if isinstance(x, T.Tensor) else np.asarray(x)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected a [3,H,W] frame, got {arr.shape}")
    return arr.astype(np.float64)


def psnr(pred, target):
    """Peak signal-to-noise ratio in dB against a [0,1] value range."""
    p = _as_frame(pred)
    t = _as_frame(target)
    if p.shape != t.shape:
        raise ShapeError(f"psnr operands differ: {p.shape} vs {t.shape}")
    mse = float(((p - t) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = size // 2
    coords = np.arange(-r, r + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (coords / sigma) ** 2)
    taps /= taps.sum()
    return np.outer(taps, taps)


_WINDOW = _gaussian_window()


def _windowed_mean(img, window):
    size = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(pred, target):
    """Mean local SSIM over valid 11x11 Gaussian windows, channel-averaged."""
    p = _as_frame(pred)
    t = _as_frame(target)
    if p.shape != t.shape:
        raise ShapeError(f"ssim operands differ: {p.shape} vs {t.shape}")
    _, h, w = p.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(
            f"frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
            "SSIM window")
    vals = []
    for c in range(3):
        x, y = p[c], t[c]
        mu_x = _windowed_mean(x, _WINDOW)
        mu_y = _windowed_mean(y, _WINDOW)
        xx = _windowed_mean(x * x, _WINDOW) - mu_x * mu_x
        yy = _windowed_mean(y * y, _WINDOW) - mu_y * mu_y
        xy = _windowed_mean(x * y, _WINDOW) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


@dataclass
class EvalReport:
    per_video: list
    mean_psnr: float
    mean_ssim: float
    latency_ms: float = None
    fps: float = None
    peak_mem_bytes: int = None

    def to_kv(self):
        lines = [f"videos={len(self.per_video)}"]
        for i, (p, s) in enumerate(self.per_video):
            lines.append(f"video{i}_psnr={_fmt(p)}")
            lines.append(f"video{i}_ssim={_fmt(s)}")
        lines.append(f"mean_psnr={_fmt(self.mean_psnr)}")
        lines.append(f"mean_ssim={_fmt(self.mean_ssim)}")
        if self.latency_ms is not None:
            lines.append(f"latency_ms={_fmt(self.latency_ms)}")
            lines.append(f"fps={_fmt(self.fps)}")
            lines.append(f"peak_mem={self.peak_mem_bytes}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "nan"
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def _finite_mean(values, label):
    finite = [v for v in values if not math.isinf(v)]
    if len(finite) != len(values):
        print(f"warning: {len(values) - len(finite)} infinite {label} "
              "value(s) excluded from the mean", file=sys.stderr)
    if not finite:
        return math.inf
    return float(np.mean(finite))


def evaluate(model, degraded_videos, clean_videos, bootstrap="ground_truth"):
    """Per-video frame-averaged PSNR/SSIM, then averaged across videos.

    Enhancement runs through the streaming path; in ground_truth mode the
    first recurrence input is the clean first frame of each video.
    """
    if len(degraded_videos) != len(clean_videos):
        raise PairingError(
            f"{len(degraded_videos)} degraded vs {len(clean_videos)} clean "
            "videos")
    if not degraded_videos:
        raise DataError("no videos to evaluate")
    per_video = []
    for vid, (deg, clean) in enumerate(zip(degraded_videos, clean_videos)):
        if len(deg.frames) != len(clean.frames):
            raise PairingError(
                f"video {vid}: {len(deg.frames)} degraded vs "
                f"{len(clean.frames)} clean frames")
        reference = clean.frames[0] if bootstrap == "ground_truth" else None
        psnrs = []
        ssims = []
        outputs = enhance_stream(model, deg.frames, bootstrap=bootstrap,
                                 reference=reference)
        for out, target in zip(outputs, clean.frames):
            psnrs.append(psnr(out, target))
            ssims.append(ssim(out, target))
        per_video.append((_finite_mean(psnrs, f"video-{vid} PSNR"),
                          float(np.mean(ssims))))
    mean_psnr = _finite_mean([p for p, _ in per_video], "per-video PSNR")
    mean_ssim = float(np.mean([s for _, s in per_video]))
    return EvalReport(per_video, mean_psnr, mean_ssim)


class BenchResult(NamedTuple):
    latency_ms: float
    fps: float
    peak_mem_bytes: int


def bench_latency(model, resolution=None, warmup=10, reps=1000):
    """Mean wall-clock forward latency after warmup, plus peak memory.

    Memory is the allocator high-water mark of one traced forward pass,
    measured after timing so tracing overhead cannot distort the latency.
    """
    if reps < 1 or warmup < 0:
        raise UsageError("bench needs reps >= 1 and warmup >= 0")
    h, w = model.config.resolution
    if resolution is not None and tuple(resolution) != (h, w):
        raise UsageError(
            f"model was built for {h}x{w}, not "
            f"{resolution[0]}x{resolution[1]}")
    rng = np.random.default_rng(0)
    y = T.Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
    x = T.Tensor(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
    for _ in range(warmup):
        model.forward(y, x, clamp=True)
    t0 = time.perf_counter()
    for _ in range(reps):
        model.forward(y, x, clamp=True)
    elapsed = time.perf_counter() - t0
    latency_ms = elapsed / reps * 1000.0
    tracemalloc.start()
    model.forward(y, x, clamp=True)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return BenchResult(latency_ms, 1000.0 / latency_ms, int(peak))
