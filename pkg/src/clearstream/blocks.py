"""Composite layers assembled from tensor-core ops.

Every block is a pure function of (input, params); parameters are leaf
Tensors created in a fixed order from the caller's RNG so that builds are
reproducible bit for bit. params() yields (local_name, tensor) pairs; the
model prefixes them into a flat namespace.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def trunc_normal(rng, shape, std: float = 0.02):
    """Normal(0, std) with draws beyond 2 sigma resampled."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(T.default_dtype())


def _param(arr) -> T.Tensor:
    return T.Tensor(np.asarray(arr, dtype=T.default_dtype()), requires_grad=True)


class Linear:
    def __init__(self, rng, din: int, dout: int):
        self.w = _param(trunc_normal(rng, (dout, din)))
        self.b = _param(np.zeros(dout))

    def __call__(self, x):
        return T.linear(x, self.w, self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-6):
        self.g = _param(np.ones(dim))
        self.b = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b, eps=self.eps)

    def params(self):
        return [("g", self.g), ("b", self.b)]


class Conv2d:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1,
                 padding: int = 0):
        self.w = _param(trunc_normal(rng, (cout, cin, k, k)))
        self.b = _param(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class ConvNextBlock:
    """Depthwise 7x7 -> LN -> pointwise C->4C -> GELU -> pointwise 4C->C,
    with a residual connection. Shape preserving."""

    def __init__(self, rng, dim: int):
        self.dw_w = _param(trunc_normal(rng, (dim, 1, 7, 7)))
        self.dw_b = _param(np.zeros(dim))
        self.norm = LayerNorm(dim)
        self.pw1 = Linear(rng, dim, 4 * dim)
        self.pw2 = Linear(rng, 4 * dim, dim)

    def __call__(self, x):
        y = T.depthwise_conv2d(x, self.dw_w, self.dw_b)
        y = T.transpose(y, (0, 2, 3, 1))
        y = self.norm(y)
        y = self.pw1(y)
        y = T.gelu(y)
        y = self.pw2(y)
        y = T.transpose(y, (0, 3, 1, 2))
        return T.add(x, y)

    def params(self):
        out = [("dw.w", self.dw_w), ("dw.b", self.dw_b)]
        out += [("norm." + n, p) for n, p in self.norm.params()]
        out += [("pw1." + n, p) for n, p in self.pw1.params()]
        out += [("pw2." + n, p) for n, p in self.pw2.params()]
        return out


class Downsample:
    """Channel LN then 2x2 stride-2 convolution mapping cin -> cout."""

    def __init__(self, rng, cin: int, cout: int):
        self.norm = LayerNorm(cin)
        self.conv = Conv2d(rng, cin, cout, k=2, stride=2)

    def __call__(self, x):
        y = T.transpose(x, (0, 2, 3, 1))
        y = self.norm(y)
        y = T.transpose(y, (0, 3, 1, 2))
        return self.conv(y)

    def params(self):
        out = [("norm." + n, p) for n, p in self.norm.params()]
        out += [("conv." + n, p) for n, p in self.conv.params()]
        return out


class MixerBlock:
    """Token mixing then channel mixing, each behind LN with a skip.

    Token matrix layout is batch x tokens x channels. The token-mixing MLP
    runs on the transposed matrix so its linears act across positions.
    """

    def __init__(self, rng, tokens: int, dim: int, hidden: int):
        self.tokens = tokens
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.tm1 = Linear(rng, tokens, hidden)
        self.tm2 = Linear(rng, hidden, tokens)
        self.norm2 = LayerNorm(dim)
        self.cm1 = Linear(rng, dim, hidden)
        self.cm2 = Linear(rng, hidden, dim)

    def mix_tokens(self, h):
        ht = T.transpose(h, (0, 2, 1))
        u = self.tm2(T.gelu(self.tm1(ht)))
        return T.transpose(u, (0, 2, 1))

    def mix_channels(self, h):
        return self.cm2(T.gelu(self.cm1(h)))

    def __call__(self, t):
        t = T.add(t, self.mix_tokens(self.norm1(t)))
        return T.add(t, self.mix_channels(self.norm2(t)))

    def params(self):
        out = []
        for name, sub in [("norm1", self.norm1), ("tm1", self.tm1),
                          ("tm2", self.tm2), ("norm2", self.norm2),
                          ("cm1", self.cm1), ("cm2", self.cm2)]:
            out += [(name + "." + n, p) for n, p in sub.params()]
        return out


class PatchEmbed:
    """Per-pixel linear embedding of RGB values (patch size 1)."""

    def __init__(self, rng, embed: int):
        self.proj = Linear(rng, 3, embed)

    def __call__(self, frame):
        # frame: B,3,H,W -> B,H,W,E
        return self.proj(T.transpose(frame, (0, 2, 3, 1)))

    def params(self):
        return [("proj." + n, p) for n, p in self.proj.params()]


class DecoderStage:
    """2x2 stride-2 transposed conv; LN + GELU except on the final stage."""

    def __init__(self, rng, cin: int, cout: int, use_norm: bool = True,
                 final: bool = False):
        self.w = _param(trunc_normal(rng, (cin, cout, 2, 2)))
        self.b = _param(np.zeros(cout))
        self.final = final
        self.norm = LayerNorm(cout) if (use_norm and not final) else None

    def __call__(self, x):
        y = T.transposed_conv2d(x, self.w, self.b, stride=2)
        if self.final:
            return y
        if self.norm is not None:
            y = T.transpose(y, (0, 2, 3, 1))
            y = self.norm(y)
            y = T.transpose(y, (0, 3, 1, 2))
        return T.gelu(y)

    def params(self):
        out = [("w", self.w), ("b", self.b)]
        if self.norm is not None:
            out += [("norm." + n, p) for n, p in self.norm.params()]
        return out
