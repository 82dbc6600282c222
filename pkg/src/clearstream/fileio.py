"""Binary interchange formats and the on-disk clip layout.

RBT1 carries a single float tensor losslessly (little-endian, row-major).
RBCK is a checkpoint: a config fingerprint plus named RBT1 records; the
optimizer state travels under reserved ``opt.`` names so a checkpoint can
resume training exactly where it stopped.  Frames are exchanged as binary
P6 portable pixmaps (8-bit) or RBT1 files inside a numbered clip directory
with a small ``clip.meta`` sidecar.
"""

import struct
from pathlib import Path

import numpy as np

from .degrade import Clip
from .errors import CheckpointMismatchError, DataError, UsageError

RBT_MAGIC = b"RBT1"
RBCK_MAGIC = b"RBCK"
RBCK_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
META_NAME = "clip.meta"

OPT_STEP_KEY = "opt.step"


# ---------------------------------------------------------------------------
# RBT1 tensors
# ---------------------------------------------------------------------------

def rbt_bytes(array):
    # asarray with an explicit order keeps rank-0 tensors rank 0, which
    # ascontiguousarray would silently promote to shape (1,)
    arr = np.asarray(array, order="C")
    if arr.dtype not in _DTYPE_CODES:
        raise UsageError(f"RBT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise UsageError("tensor rank exceeds RBT1 limit")
    head = [RBT_MAGIC, struct.pack("B", arr.ndim)]
    for d in arr.shape:
        head.append(struct.pack("<I", d))
    head.append(struct.pack("B", _DTYPE_CODES[arr.dtype]))
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return b"".join(head) + payload


def write_rbt(path, array):
    Path(path).write_bytes(rbt_bytes(array))


class _Cursor:
    def __init__(self, buf, label):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.label}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise DataError(
                f"{self.label}: {len(self.buf) - self.pos} trailing bytes")


def _read_rbt_record(cur):
    if cur.take(4) != RBT_MAGIC:
        raise DataError(f"{cur.label}: bad RBT1 magic")
    rank = struct.unpack("B", cur.take(1))[0]
    shape = tuple(struct.unpack("<I", cur.take(4))[0] for _ in range(rank))
    code = struct.unpack("B", cur.take(1))[0]
    if code not in _CODE_DTYPES:
        raise DataError(f"{cur.label}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = cur.take(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def read_rbt(path):
    cur = _Cursor(Path(path).read_bytes(), str(path))
    arr = _read_rbt_record(cur)
    cur.done()
    return arr


# ---------------------------------------------------------------------------
# P6 portable pixmaps
# ---------------------------------------------------------------------------

def write_ppm(path, frame):
    """Quantize a [3,H,W] frame in [0,1] to 8-bit binary PPM."""
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise UsageError(f"expected a [3,H,W] frame, got {arr.shape}")
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quant.transpose(1, 2, 0).tobytes())


def _next_token(buf, pos, label):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError(f"{label}: truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path):
    """Read a binary P6 pixmap into a [3,H,W] float32 frame in [0,1]."""
    label = str(path)
    buf = Path(path).read_bytes()
    magic, pos = _next_token(buf, 0, label)
    if magic != b"P6":
        raise DataError(f"{label}: not a binary P6 pixmap")
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos, label)
        if not tok.isdigit():
            raise DataError(f"{label}: bad PPM header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{label}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte separates header from payload
    payload = buf[pos:]
    if len(payload) != w * h * 3:
        raise DataError(
            f"{label}: payload is {len(payload)} bytes, expected {w * h * 3}")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# RBCK checkpoints
# ---------------------------------------------------------------------------

def _opt_entries(opt_state):
    yield OPT_STEP_KEY, np.array(float(opt_state.step), dtype=np.float64)
    for name in sorted(opt_state.m):
        yield f"opt.{name}.m", opt_state.m[name]
    for name in sorted(opt_state.v):
        yield f"opt.{name}.v", opt_state.v[name]


def save_checkpoint(path, model, opt_state=None):
    entries = list(model.state_dict().items())
    if opt_state is not None:
        entries.extend(_opt_entries(opt_state))
    parts = [RBCK_MAGIC,
             struct.pack("<H", RBCK_VERSION),
             struct.pack("<I", model.config.fingerprint()),
             struct.pack("<I", len(entries))]
    for name, arr in entries:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise UsageError(f"checkpoint entry name too long: {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(rbt_bytes(arr))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint_records(path):
    """Parse an RBCK file into (fingerprint, ordered name->array dict)."""
    label = str(path)
    cur = _Cursor(Path(path).read_bytes(), label)
    if cur.take(4) != RBCK_MAGIC:
        raise DataError(f"{label}: bad RBCK magic")
    version = struct.unpack("<H", cur.take(2))[0]
    if version != RBCK_VERSION:
        raise DataError(f"{label}: unsupported checkpoint version {version}")
    fingerprint = struct.unpack("<I", cur.take(4))[0]
    count = struct.unpack("<I", cur.take(4))[0]
    records = {}
    for _ in range(count):
        nlen = struct.unpack("<H", cur.take(2))[0]
        name = cur.take(nlen).decode("utf-8")
        if name in records:
            raise DataError(f"{label}: duplicate entry {name!r}")
        records[name] = _read_rbt_record(cur)
    cur.done()
    return fingerprint, records


def load_checkpoint(path, model):
    """Restore weights (and optimizer state if present) into a built model.

    The stored fingerprint must match the model's config; returns an
    AdamState when the checkpoint carries one, else None.
    """
    from .runtime import AdamState  # local import keeps module layering flat

    fingerprint, records = read_checkpoint_records(path)
    want = model.config.fingerprint()
    if fingerprint != want:
        raise CheckpointMismatchError(
            f"{path}: checkpoint fingerprint {fingerprint:#010x} does not "
            f"match the active config {want:#010x}")
    weights = {k: v for k, v in records.items() if not k.startswith("opt.")}
    model.load_state(weights)
    if OPT_STEP_KEY not in records:
        return None
    state = AdamState(model.parameters())
    state.step = int(round(float(records[OPT_STEP_KEY])))
    for name in state.m:
        try:
            m = records[f"opt.{name}.m"]
            v = records[f"opt.{name}.v"]
        except KeyError as missing:
            raise DataError(
                f"{path}: optimizer state is missing {missing.args[0]!r}"
            ) from None
        if m.shape != state.m[name].shape or v.shape != state.v[name].shape:
            raise DataError(
                f"{path}: optimizer moment shape mismatch for {name!r}")
        state.m[name] = m.astype(np.float32, copy=False)
        state.v[name] = v.astype(np.float32, copy=False)
    return state


# ---------------------------------------------------------------------------
# clip directories
# ---------------------------------------------------------------------------

def _frame_name(index, fmt):
    return f"{index:06d}.{fmt}"


def write_clip(directory, clip, fmt="ppm"):
    if fmt not in ("ppm", "rbt"):
        raise UsageError(f"unknown clip format {fmt!r}")
    clip.validate()
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        path = out / _frame_name(i, fmt)
        if fmt == "ppm":
            write_ppm(path, frame)
        else:
            write_rbt(path, np.asarray(frame, dtype=np.float32))
    meta = (f"fps={clip.fps!r}\n"
            f"frames={len(clip.frames)}\n"
            f"format={fmt}\n")
    (out / META_NAME).write_text(meta)


def _parse_meta(path):
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep or key not in ("fps", "frames", "format"):
            raise DataError(f"{path}: bad meta line {lineno}: {raw!r}")
        values[key] = val
    for key in ("fps", "frames", "format"):
        if key not in values:
            raise DataError(f"{path}: meta is missing {key!r}")
    if values["format"] not in ("ppm", "rbt"):
        raise DataError(f"{path}: unknown clip format {values['format']!r}")
    return float(values["fps"]), int(values["frames"]), values["format"]


def read_clip(directory):
    root = Path(directory)
    meta_path = root / META_NAME
    if not root.is_dir() or not meta_path.is_file():
        raise DataError(f"{directory}: not a clip directory (no {META_NAME})")
    fps, count, fmt = _parse_meta(meta_path)
    if count < 1:
        raise DataError(f"{directory}: clip.meta declares no frames")
    on_disk = len(list(root.glob(f"*.{fmt}")))
    if on_disk != count:
        raise DataError(
            f"{directory}: clip.meta declares {count} frames but "
            f"{on_disk} .{fmt} files are present")
    frames = []
    for i in range(count):
        path = root / _frame_name(i, fmt)
        if not path.is_file():
            raise DataError(f"{directory}: missing frame file {path.name}")
        if fmt == "ppm":
            frames.append(read_ppm(path))
        else:
            arr = read_rbt(path)
            if arr.ndim != 3 or arr.shape[0] != 3:
                raise DataError(
                    f"{path}: frame tensor is {arr.shape}, expected [3,H,W]")
            frames.append(arr.astype(np.float32, copy=False))
    clip = Clip(frames, fps)
    clip.validate()
    return clip
