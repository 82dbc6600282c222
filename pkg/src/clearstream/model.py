"""Full enhancer assembly: dual-branch encoder, mixer bottlenecks, fusion,
decoder; plus presets and analytic parameter/FLOP accounting.

The forward map takes the previous output frame and the current input frame
and produces the next output frame at the same resolution. Branch I encodes
the 6-channel stack of both frames through conv blocks with four stride-2
downsamples; branch II tokenizes each frame per pixel, pools 16x16, and
mixes the concatenated token sets; the fused tokens are decoded back to
full resolution by four stride-2 transposed-conv stages.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks as B
from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError

POOL_FACTOR = 16  # four stride-2 downsamples; branch II pools by the same ratio


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Resolution is part of the model identity
    because the token-mixing MLP widths depend on the token count."""

    depths: tuple = (4, 4, 4, 4)
    dims: tuple = (28, 36, 48, 64)
    bottleneck_depth: int = 4
    bottleneck_hidden: int = 728
    patch_size: int = 1
    branch2_embed: int = 256
    frames: int = 2
    decoder_norm: bool = True
    resolution: tuple = (384, 384)

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.dims) != 4:
            raise ConfigError("depths and dims must each list 4 levels")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.dims):
            raise ConfigError("depths and dims must be positive")
        if self.patch_size != 1:
            raise ConfigError("patch_size is fixed to 1")
        if self.frames != 2:
            raise ConfigError("the forward map takes exactly 2 frames")
        h, w = self.resolution
        if h % POOL_FACTOR or w % POOL_FACTOR:
            raise ConfigError(f"resolution {h}x{w} must be divisible by {POOL_FACTOR}")
        if self.bottleneck_depth < 1 or self.bottleneck_hidden < 1:
            raise ConfigError("bottleneck depth and hidden dim must be positive")
        if self.branch2_embed < 1:
            raise ConfigError("branch2_embed must be positive")

    @property
    def token_count(self) -> int:
        h, w = self.resolution
        return (h // POOL_FACTOR) * (w // POOL_FACTOR)

    def canonical(self) -> str:
        """Stable key=value serialization used for checkpoint fingerprints."""
        items = [
            ("depths", ",".join(str(d) for d in self.depths)),
            ("dims", ",".join(str(d) for d in self.dims)),
            ("bottleneck_depth", self.bottleneck_depth),
            ("bottleneck_hidden", self.bottleneck_hidden),
            ("patch_size", self.patch_size),
            ("branch2_embed", self.branch2_embed),
            ("frames", self.frames),
            ("decoder_norm", int(self.decoder_norm)),
            ("resolution", f"{self.resolution[0]}x{self.resolution[1]}"),
        ]
        return "\n".join(f"{k}={v}" for k, v in items)

    def fingerprint(self) -> int:
        return zlib.crc32(self.canonical().encode("ascii")) & 0xFFFFFFFF


_PRESETS = {
    "S": dict(depths=(4, 4, 4, 4), dims=(28, 36, 48, 64),
              bottleneck_depth=4, bottleneck_hidden=728, branch2_embed=256),
    "M": dict(depths=(4, 4, 4, 4), dims=(64, 80, 108, 116),
              bottleneck_depth=4, bottleneck_hidden=728, branch2_embed=256),
    "L": dict(depths=(5, 5, 5, 4), dims=(172, 180, 188, 196),
              bottleneck_depth=4, bottleneck_hidden=728, branch2_embed=256),
    # desk-scale verification preset
    "tiny": dict(depths=(1, 1, 1, 1), dims=(4, 4, 4, 4),
                 bottleneck_depth=1, bottleneck_hidden=8, branch2_embed=8),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, resolution=(384, 384)) -> ModelConfig:
    if name not in _PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    cfg = ModelConfig(resolution=tuple(resolution), **_PRESETS[name])
    cfg.validate()
    return cfg


class Enhancer:
    """(previous output frame, current frame) -> enhanced current frame."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(seed))
        d = config.dims
        n = config.token_count
        c = d[3]

        self.stem = B.Conv2d(rng, 3 * config.frames, d[0], k=3, stride=1, padding=1)
        self.levels = []
        for i in range(4):
            blks = [B.ConvNextBlock(rng, d[i]) for _ in range(config.depths[i])]
            down = B.Downsample(rng, d[i], d[min(i + 1, 3)])
            self.levels.append((blks, down))
        self.mix1 = [B.MixerBlock(rng, n, c, config.bottleneck_hidden)
                     for _ in range(config.bottleneck_depth)]

        self.embed = B.PatchEmbed(rng, config.branch2_embed)
        self.proj = B.Linear(rng, config.branch2_embed, c)
        self.mix2 = [B.MixerBlock(rng, config.frames * n, c, config.bottleneck_hidden)
                     for _ in range(config.bottleneck_depth)]

        chans = [d[3], d[2], d[1], d[0], 3]
        self.decoder = [B.DecoderStage(rng, chans[i], chans[i + 1],
                                       use_norm=config.decoder_norm,
                                       final=(i == 3))
                        for i in range(4)]

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        """Flat (name, tensor) list in a fixed, build-independent order."""
        out = [("stem." + n, p) for n, p in self.stem.params()]
        for i, (blks, down) in enumerate(self.levels):
            for j, blk in enumerate(blks):
                out += [(f"enc{i}.blk{j}." + n, p) for n, p in blk.params()]
            out += [(f"enc{i}.down." + n, p) for n, p in down.params()]
        for k, blk in enumerate(self.mix1):
            out += [(f"mix1.{k}." + n, p) for n, p in blk.params()]
        out += [("embed." + n, p) for n, p in self.embed.params()]
        out += [("proj." + n, p) for n, p in self.proj.params()]
        for k, blk in enumerate(self.mix2):
            out += [(f"mix2.{k}." + n, p) for n, p in blk.params()]
        for i, st in enumerate(self.decoder):
            out += [(f"dec{i}." + n, p) for n, p in st.params()]
        return out

    def state_dict(self):
        return {name: p.data for name, p in self.parameters()}

    def load_state(self, state: dict) -> None:
        params = dict(self.parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state does not match model: missing={missing[:3]} "
                              f"extra={extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _check_frame(self, f: T.Tensor, what: str) -> None:
        h, w = self.config.resolution
        if f.ndim != 4 or f.shape[1] != 3:
            raise ShapeError(f"{what} must be [B,3,H,W], got {tuple(f.shape)}")
        if (f.shape[2], f.shape[3]) != (h, w):
            raise ShapeError(f"{what} is {f.shape[2]}x{f.shape[3]}, "
                             f"model built for {h}x{w}")

    def _to_tokens(self, fmap: T.Tensor) -> T.Tensor:
        b, c, hh, ww = fmap.shape
        return T.transpose(T.reshape(fmap, (b, c, hh * ww)), (0, 2, 1))

    def _tokens_to_map(self, tokens: T.Tensor) -> T.Tensor:
        b, n, c = tokens.shape
        h, w = self.config.resolution
        hh, ww = h // POOL_FACTOR, w // POOL_FACTOR
        return T.reshape(T.transpose(tokens, (0, 2, 1)), (b, c, hh, ww))

    def forward(self, y_prev: T.Tensor, x_cur: T.Tensor, clamp: bool = False) -> T.Tensor:
        self._check_frame(y_prev, "previous frame")
        self._check_frame(x_cur, "current frame")
        if y_prev.shape != x_cur.shape:
            raise ShapeError("frame pair must share a batch size")
        n = self.config.token_count

        # branch I: conv encoder over the 6-channel stack
        h = self.stem(T.concat([y_prev, x_cur], axis=1))
        for blks, down in self.levels:
            for blk in blks:
                h = blk(h)
            h = down(h)
        t1 = self._to_tokens(h)
        for blk in self.mix1:
            t1 = blk(t1)

        # branch II: per-frame pixel tokens, pooled and mixed jointly
        toks = []
        for frame in (y_prev, x_cur):
            e = self.embed(frame)                       # B,H,W,E
            e = T.transpose(e, (0, 3, 1, 2))
            e = T.maxpool2d(e, POOL_FACTOR, POOL_FACTOR)
            tk = self._to_tokens(e)                     # B,N,E
            toks.append(self.proj(tk))                  # B,N,C
        t2 = T.concat(toks, axis=1)                     # B,2N,C
        for blk in self.mix2:
            t2 = blk(t2)
        halves = T.add(T.narrow(t2, 1, 0, n), T.narrow(t2, 1, n, n))
        t2 = T.mul_const(halves, 0.5)

        if t1.shape != t2.shape:
            raise ShapeError(f"branch token shapes disagree: {t1.shape} vs {t2.shape}")
        fused = T.add(t1, t2)

        out = self._tokens_to_map(fused)
        for stage in self.decoder:
            out = stage(out)
        if clamp:
            return T.Tensor(np.clip(out.data, 0.0, 1.0), dtype=out.data.dtype)
        return out


def build(config: ModelConfig, seed: int) -> Enhancer:
    return Enhancer(config, seed)


def count_params(model: Enhancer) -> int:
    return int(sum(p.size for _, p in model.parameters()))


def count_flops(config: ModelConfig, frames: int = 2) -> int:
    """Analytic MAC x 2 accounting for one forward pass of one frame pair.

    Conventions: conv 2*Cout*Cin*kh*kw*out_positions/groups, linear
    2*Dout*Din*positions, LN 5/element, GELU 10/element. Transposed convs
    count 2*Cout*Cin*kh*kw*(input positions), which is the conv formula read
    along its adjoint direction. Bias adds, residual adds, pooling, and
    reshapes are not counted.
    """
    cfg = replace(config, frames=frames)
    h, w = cfg.resolution
    d = cfg.dims
    total = 0

    # stem 3x3 stride 1
    total += 2 * d[0] * (3 * frames) * 9 * h * w
    hh, ww = h, w
    for i in range(4):
        c = d[i]
        per_block = (2 * c * 49        # depthwise, groups == C
                     + 5 * c           # LN
                     + 2 * (4 * c) * c  # pointwise up
                     + 10 * (4 * c)    # GELU
                     + 2 * c * (4 * c))  # pointwise down
        total += cfg.depths[i] * per_block * hh * ww
        cn = d[min(i + 1, 3)]
        total += 5 * c * hh * ww       # downsample LN
        hh //= 2
        ww //= 2
        total += 2 * cn * c * 4 * hh * ww

    n = hh * ww
    c = d[3]
    hid = cfg.bottleneck_hidden

    def mixer_flops(tokens: int) -> int:
        f = 5 * tokens * c                 # LN 1
        f += 2 * hid * tokens * c          # token MLP up (positions = C)
        f += 10 * hid * c                  # GELU
        f += 2 * tokens * hid * c          # token MLP down
        f += 5 * tokens * c                # LN 2
        f += 2 * hid * c * tokens          # channel MLP up (positions = tokens)
        f += 10 * hid * tokens             # GELU
        f += 2 * c * hid * tokens          # channel MLP down
        return f

    total += cfg.bottleneck_depth * mixer_flops(n)

    # branch II
    total += 2 * cfg.branch2_embed * 3 * h * w * frames   # per-pixel embed
    total += 2 * c * cfg.branch2_embed * n * frames       # channel projection
    total += cfg.bottleneck_depth * mixer_flops(frames * n)

    # decoder
    chans = [d[3], d[2], d[1], d[0], 3]
    dh, dw = hh, ww
    for i in range(4):
        cin, cout = chans[i], chans[i + 1]
        total += 2 * cout * cin * 4 * dh * dw
        dh *= 2
        dw *= 2
        if i < 3:
            if cfg.decoder_norm:
                total += 5 * cout * dh * dw
            total += 10 * cout * dh * dw
    return int(total)
