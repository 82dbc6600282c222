"""Dense tensors, the numerical kernels the model needs, and reverse-mode
automatic differentiation over them.

The op set is deliberately small: exactly what a dual-branch encoder/mixer/
decoder network plus its training loop requires. Every op is a pure function
from input Tensors to an output Tensor. When a Tape is active and any input
participates in gradients, the op records a node; Tape.backward replays the
nodes in reverse and accumulates gradients additively into leaf tensors.

Precision is a module-level switch: float32 by default, float64 for
gradient and adjoint verification runs (see set_default_dtype/using_dtype).
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UsageError

_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = False
_TAPE_STACK: list["Tape"] = []

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Set the scalar precision used for newly created tensors.

    Accepts "float32"/"float64" or the numpy dtypes. Ops inherit operand
    dtype, so switching affects tensors created afterwards.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default precision (verification runs)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_debug_checks(enabled: bool) -> None:
    """Toggle the finite-output assertion applied after every forward op."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional array with optional gradient-tape participation.

    data is always a contiguous-enough numpy array of float32 or float64.
    grad, when populated by backward(), matches data's shape. Tensors whose
    _node is None are leaves; parameters are leaves with requires_grad True.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this tensor's buffer, cut from any tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of op nodes for one forward/backward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. The tape is single-writer: enter it (as a
    context manager) around one forward pass, then call backward once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._active = False

    def __enter__(self):
        if self._active:
            raise UsageError("tape is already active")
        self._active = True
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self._active = False
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> int:
        """Accumulate dLoss/dLeaf into every requires_grad leaf.

        Walks the recorded nodes in reverse, visiting each at most once.
        Returns the number of nodes that received a gradient.
        """
        if loss.data.size != 1:
            raise UsageError("backward requires a scalar loss")
        if not self.nodes:
            raise UsageError("backward on an empty tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = 0
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            visited += 1
            in_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = ig if t.grad is None else t.grad + ig
                else:
                    k = id(t)
                    pending[k] = ig if k not in pending else pending[k] + ig
        return visited

    def clear(self) -> None:
        self.nodes.clear()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    if _DEBUG_CHECKS:
        assert np.all(np.isfinite(out_data)), "op produced non-finite values"
    tape = _active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req, dtype=out_data.dtype)
    if req:
        node = _Node(out, tuple(inputs), backward_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _require_ndim(t: Tensor, n: int, what: str):
    if t.ndim != n:
        raise ShapeError(f"{what} must be {n}-d, got shape {tuple(t.shape)}")
    return t.shape


def _require_vec(t: Tensor, n: int, what: str):
    if t.ndim != 1 or t.shape[0] != n:
        raise ShapeError(f"{what} must have shape ({n},), got {tuple(t.shape)}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    out = x.data + np.asarray(c, dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (g,))


def mul_const(x: Tensor, c: float) -> Tensor:
    cc = np.asarray(c, dtype=x.data.dtype)
    out = x.data * cc
    return _make(out, (x,), lambda g: (g * cc,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _make(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)

    return _make(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        return ((np.broadcast_to(g, x.shape) / n).astype(x.data.dtype, copy=False),)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                grads.append(np.ascontiguousarray(g[tuple(idx)]))
            else:
                grads.append(None)
        return grads

    return _make(out, tuple(tensors), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds axis {axis} "
                         f"of shape {tuple(x.shape)}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[idx] = g
        return (dx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# neural-net kernels
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis, batched over all leading axes."""
    if x.ndim < 1:
        raise ShapeError("linear input must have at least one axis")
    din = x.shape[-1]
    dout, dw = _require_ndim(w, 2, "linear weight")
    if dw != din:
        raise ShapeError(f"linear: input last axis {din} != weight Din {dw}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data.T
    if b is not None:
        _require_vec(b, dout, "linear bias")
        out = out + b.data
    out = out.reshape(*lead, dout)

    inputs = [x, w] + ([b] if b is not None else [])

    def backward(g):
        g2 = g.reshape(-1, dout)
        dx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        dw_ = g2.T @ x2 if w.requires_grad else None
        grads = [dx, dw_]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, inputs, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, zero padding, layout [B,Cin,H,W] x [Cout,Cin,kh,kw]."""
    B, cin, H, W = _require_ndim(x, 4, "conv2d input")
    cout, cw, kh, kw = _require_ndim(w, 4, "conv2d weight")
    if cw != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight Cin {cw}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{H + 2 * padding}x{W + 2 * padding}")
    s = stride
    ho = (H + 2 * padding - kh) // s + 1
    wo = (W + 2 * padding - kw) // s + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    wd = w.data
    acc = np.zeros((B, ho, wo, cout), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]
            acc += np.tensordot(sl, wd[:, :, u, v], axes=((1,), (1,)))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if b is not None:
        _require_vec(b, cout, "conv2d bias")
        out += b.data[None, :, None, None]

    inputs = [x, w] + ([b] if b is not None else [])

    def backward(g):
        gb = g.transpose(0, 2, 3, 1)
        dx = None
        dw_ = None
        if x.requires_grad:
            dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, cin), dtype=g.dtype)
        if w.requires_grad:
            dw_ = np.zeros_like(wd)
        for u in range(kh):
            for v in range(kw):
                if w.requires_grad:
                    sl = xp[:, :, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s]
                    dw_[:, :, u, v] = np.tensordot(gb, sl, axes=((0, 1, 2), (0, 2, 3)))
                if x.requires_grad:
                    dxp[:, u:u + s * (ho - 1) + 1:s, v:v + s * (wo - 1) + 1:s, :] += \
                        np.tensordot(gb, wd[:, :, u, v], axes=((3,), (0,)))
        if x.requires_grad:
            dx = dxp.transpose(0, 3, 1, 2)
            if padding:
                dx = dx[:, :, padding:padding + H, padding:padding + W]
            dx = np.ascontiguousarray(dx)
        grads = [dx, dw_]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, inputs, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel 7x7 convolution, stride 1, zero padding 3 (shape-preserving)."""
    B, C, H, W = _require_ndim(x, 4, "depthwise input")
    cw, one, kh, kw = _require_ndim(w, 4, "depthwise weight")
    if cw != C:
        raise ShapeError(f"depthwise: input channels {C} != weight channels {cw}")
    if one != 1 or kh != 7 or kw != 7:
        raise ShapeError(f"depthwise weight must be [C,1,7,7], got {tuple(w.shape)}")
    pad = 3
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wd = w.data[:, 0]
    out = np.zeros_like(x.data)
    for u in range(7):
        for v in range(7):
            out += xp[:, :, u:u + H, v:v + W] * wd[:, u, v][None, :, None, None]
    if b is not None:
        _require_vec(b, C, "depthwise bias")
        out += b.data[None, :, None, None]

    inputs = [x, w] + ([b] if b is not None else [])

    def backward(g):
        dx = None
        dw_ = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
        if w.requires_grad:
            dw_ = np.zeros_like(w.data)
        for u in range(7):
            for v in range(7):
                if w.requires_grad:
                    dw_[:, 0, u, v] = np.einsum('bchw,bchw->c', g,
                                                xp[:, :, u:u + H, v:v + W])
                if x.requires_grad:
                    dxp[:, :, u:u + H, v:v + W] += g * wd[:, u, v][None, :, None, None]
        if x.requires_grad:
            dx = np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])
        grads = [dx, dw_]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, inputs, backward)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
                      stride: int = 2, padding: int = 0) -> Tensor:
    """Stride-s transposed convolution, layout [B,Cin,H,W] x [Cin,Cout,kh,kw].

    Acts as the adjoint of conv2d with the same weight buffer: feeding a
    conv2d weight [Cout,Cin,kh,kw] here (interpreted as [in,out,kh,kw])
    satisfies <conv2d(x;w), y> == <x, transposed_conv2d(y;w)>.
    """
    B, cin, H, W = _require_ndim(x, 4, "transposed_conv2d input")
    cw, cout, kh, kw = _require_ndim(w, 4, "transposed_conv2d weight")
    if cw != cin:
        raise ShapeError(f"transposed_conv2d: input channels {cin} != weight rows {cw}")
    s = stride
    hf = (H - 1) * s + kh
    wf = (W - 1) * s + kw
    ho = hf - 2 * padding
    wo = wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("transposed_conv2d: padding removes entire output")
    wd = w.data
    xb = x.data.transpose(0, 2, 3, 1)
    accf = np.zeros((B, hf, wf, cout), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            accf[:, u:u + s * (H - 1) + 1:s, v:v + s * (W - 1) + 1:s, :] += \
                np.tensordot(xb, wd[:, :, u, v], axes=((3,), (0,)))
    out = np.ascontiguousarray(
        accf[:, padding:padding + ho, padding:padding + wo, :].transpose(0, 3, 1, 2))
    if b is not None:
        _require_vec(b, cout, "transposed_conv2d bias")
        out += b.data[None, :, None, None]

    inputs = [x, w] + ([b] if b is not None else [])

    def backward(g):
        gf = np.zeros((B, hf, wf, cout), dtype=g.dtype)
        gf[:, padding:padding + ho, padding:padding + wo, :] = g.transpose(0, 2, 3, 1)
        dx = None
        dw_ = None
        if x.requires_grad:
            dxb = np.zeros((B, H, W, cin), dtype=g.dtype)
        if w.requires_grad:
            dw_ = np.zeros_like(wd)
        for u in range(kh):
            for v in range(kw):
                sl = gf[:, u:u + s * (H - 1) + 1:s, v:v + s * (W - 1) + 1:s, :]
                if x.requires_grad:
                    dxb += np.tensordot(sl, wd[:, :, u, v], axes=((3,), (1,)))
                if w.requires_grad:
                    dw_[:, :, u, v] = np.tensordot(xb, sl, axes=((0, 1, 2), (0, 1, 2)))
        if x.requires_grad:
            dx = np.ascontiguousarray(dxb.transpose(0, 3, 1, 2))
        grads = [dx, dw_]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, inputs, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    C = x.shape[-1]
    _require_vec(gamma, C, "layer_norm gamma")
    _require_vec(beta, C, "layer_norm beta")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * istd
    out = xhat * gamma.data + beta.data

    def backward(g):
        dgamma = (g * xhat).reshape(-1, C).sum(axis=0) if gamma.requires_grad else None
        dbeta = g.reshape(-1, C).sum(axis=0) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gamma.data
            dx = istd * (dxh
                         - dxh.mean(axis=-1, keepdims=True)
                         - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * np.asarray(_INV_SQRT2, dtype=xd.dtype)))
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * np.asarray(_INV_SQRT_2PI, dtype=xd.dtype)
        return (g * (cdf + xd * pdf),)

    return _make(out, (x,), backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Non-overlapping max pooling; backward routes to the argmax only."""
    if window != stride:
        raise UsageError("maxpool2d supports window == stride only")
    B, C, H, W = _require_ndim(x, 4, "maxpool2d input")
    s = stride
    if H % s or W % s:
        raise ShapeError(f"maxpool2d: {H}x{W} not divisible by stride {s}")
    ho, wo = H // s, W // s
    r = x.data.reshape(B, C, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
    r = np.ascontiguousarray(r).reshape(B, C, ho, wo, s * s)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dr = np.zeros((B, C, ho, wo, s * s), dtype=g.dtype)
        np.put_along_axis(dr, idx[..., None], g[..., None], axis=-1)
        dx = dr.reshape(B, C, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (np.ascontiguousarray(dx),)

    return _make(out, (x,), backward)
