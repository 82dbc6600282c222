"""Frame-recurrent inference and training.

Inference is a streaming loop: each enhanced frame is fed back as the
recurrence input for the next one, so memory use is flat in the stream
length (nothing is recorded outside a training tape).  Training unrolls a
short clip under one tape, averages a Charbonnier penalty over the frames,
and applies a single Adam step with a cosine-annealed learning rate.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError, StreamError, UsageError

BOOTSTRAP_MODES = ("passthrough", "ground_truth")


@dataclass
class StreamState:
    """Carry-over between consecutive streaming steps."""

    y_prev: T.Tensor
    frame_index: int
    bootstrap_mode: str


@dataclass
class TrainConfig:
    lr0: float = 4e-4
    lr_min: float = 1e-7
    total_steps: int = 500_000
    clip_length: int = 10
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    charbonnier_eps: float = 1e-3
    # gradient is propagated at most this many frames back through the
    # recurrence; None means the full clip
    bptt_window: int | None = None
    # sever the feedback edge entirely (recurrent input treated as data)
    detach_recurrent: bool = False
    grad_clip: float = 0.0

    def validate(self):
        if not (0.0 < self.lr_min < self.lr0):
            raise UsageError("learning-rate bounds must satisfy 0 < lr_min < lr0")
        if self.total_steps < 1:
            raise UsageError("total_steps must be positive")
        if self.clip_length < 1:
            raise UsageError("clip_length must be positive")
        if self.bptt_window is not None and self.bptt_window < 1:
            raise UsageError("bptt_window must be at least 1")
        if self.charbonnier_eps <= 0:
            raise UsageError("charbonnier_eps must be positive")
        return self


def charbonnier(pred, target, eps=1e-3):
    """Smooth L1 penalty: mean of sqrt((pred - target)^2 + eps^2)."""
    if eps <= 0:
        raise UsageError("charbonnier eps must be positive")
    if pred.shape != target.shape:
        raise ShapeError(
            f"charbonnier operands differ: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.mean_all(T.sqrt(T.add_const(T.mul(diff, diff), eps * eps)))


def lr_at(step, cfg):
    """Cosine annealing from lr0 down to lr_min over total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise UsageError(
            f"step {step} outside schedule range [0, {cfg.total_steps}]")
    cos = math.cos(math.pi * step / cfg.total_steps)
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + cos)


class AdamState:
    """First/second moment accumulators plus the global step counter."""

    def __init__(self, named_params):
        self.step = 0
        self.m = {}
        self.v = {}
        for name, p in named_params:
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def matches(self, named_params):
        names = {name for name, _ in named_params}
        return names == set(self.m) and names == set(self.v)


def adam_init(model):
    return AdamState(model.parameters())


def adam_step(named_params, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update in place.  Missing grads count as zero."""
    if not state.matches(named_params):
        raise UsageError("optimizer state does not match the parameter set")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def _batched(frame):
    arr = frame.data if isinstance(frame, T.Tensor) else np.asarray(frame)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected a [3,H,W] frame, got {arr.shape}")
    return T.Tensor(arr)


def enhance_stream(model, frames, bootstrap="passthrough", reference=None):
    """Yield one enhanced frame per input frame.

    The first step uses ``reference`` as the recurrence input in
    ground_truth mode, or the first input frame itself in passthrough
    mode.  Outputs are clamped to [0,1] and yielded as [3,H,W] arrays.
    """
    if bootstrap not in BOOTSTRAP_MODES:
        raise UsageError(f"unknown bootstrap mode {bootstrap!r}")
    if bootstrap == "ground_truth" and reference is None:
        raise UsageError("ground_truth bootstrap needs a reference frame")
    state = None
    for idx, frame in enumerate(frames):
        x = _batched(frame)
        if state is None:
            y_prev = _batched(reference) if bootstrap == "ground_truth" else x
            if y_prev.shape != x.shape:
                raise StreamError(
                    f"reference shape {y_prev.shape} does not match "
                    f"first frame {x.shape}")
        else:
            if x.shape != state.y_prev.shape:
                raise StreamError(
                    f"resolution changed mid-stream at frame {idx}: "
                    f"{state.y_prev.shape} -> {x.shape}")
            y_prev = state.y_prev
        y = model.forward(y_prev, x, clamp=True)
        state = StreamState(y, idx, bootstrap)
        yield y.data[0].copy()


def _mean_loss(losses):
    total = losses[0]
    for term in losses[1:]:
        total = T.add(total, term)
    return T.mul_const(total, 1.0 / len(losses))


def clip_unroll_loss(model, degraded_frames, clean_frames, cfg):
    """Unrolled recurrent forward over a clip; returns the scalar loss Tensor.

    Meant to run under an active tape.  The recurrence input starts from the
    clean first frame and is the live previous prediction afterwards, cut at
    bptt_window boundaries (or every step when detach_recurrent is set).
    """
    n = len(degraded_frames)
    if n == 0:
        raise DataError("cannot train on an empty clip")
    if len(clean_frames) != n:
        raise DataError(
            f"clip lengths differ: {n} degraded vs {len(clean_frames)} clean")
    window = cfg.bptt_window if cfg.bptt_window is not None else n
    if window > n:
        window = n
    y_prev = _batched(clean_frames[0])
    losses = []
    for t in range(n):
        if t > 0 and t % window == 0:
            y_prev = y_prev.detach()
        y = model.forward(y_prev, _batched(degraded_frames[t]))
        losses.append(charbonnier(y, _batched(clean_frames[t]),
                                  cfg.charbonnier_eps))
        y_prev = y.detach() if cfg.detach_recurrent else y
    return _mean_loss(losses)


def _clip_gradients(named_params, max_norm):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_clip(model, degraded_clip, clean_clip, opt_state, cfg):
    """One optimization step over one clip.  Returns (loss value, state)."""
    cfg.validate()
    model.zero_grads()
    with T.Tape() as tape:
        loss = clip_unroll_loss(model, degraded_clip.frames,
                                clean_clip.frames, cfg)
        tape.backward(loss)
    if cfg.grad_clip > 0:
        _clip_gradients(model.parameters(), cfg.grad_clip)
    lr = lr_at(min(opt_state.step, cfg.total_steps), cfg)
    adam_step(model.parameters(), opt_state, lr,
              betas=cfg.betas, eps=cfg.adam_eps)
    return float(loss.data), opt_state


def format_log_line(step, lr, loss):
    return f"{step}\t{lr:.10e}\t{loss:.10e}\n"


def run_training(model, clip_pairs, cfg, steps, opt_state=None, rng=None,
                 log=None, checkpoint_every=0, on_checkpoint=None):
    """Drive train_clip for a number of steps over a pool of clip pairs.

    clip_pairs is a sequence of (degraded, clean) tuples; each step picks
    one (round-robin with a seeded shuffle when rng is given).  Writes one
    tab-separated ``step lr loss`` line per step to ``log`` (flushed), and
    invokes on_checkpoint(step) every checkpoint_every steps.
    """
    if not clip_pairs:
        raise DataError("no training clips")
    if opt_state is None:
        opt_state = adam_init(model)
    order = list(range(len(clip_pairs)))
    losses = []
    for _ in range(steps):
        pos = opt_state.step % len(order)
        if pos == 0 and rng is not None:
            rng.shuffle(order)
        degraded, clean = clip_pairs[order[pos]]
        lr = lr_at(min(opt_state.step, cfg.total_steps), cfg)
        loss, opt_state = train_clip(model, degraded, clean, opt_state, cfg)
        losses.append(loss)
        if log is not None:
            log.write(format_log_line(opt_state.step, lr, loss))
            log.flush()
        if checkpoint_every and on_checkpoint is not None \
                and opt_state.step % checkpoint_every == 0:
            on_checkpoint(opt_state.step)
    return losses, opt_state
