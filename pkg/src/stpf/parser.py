"""Byte-level codecs for stpf's file formats.

Each format has a parse_* / format_* pair working on bytes or text; the
filesystem side lives in preprocessor.py.

FRMS frame stack (little-endian):
    "FRMS" | version u32 = 1 | name length u16 | name UTF-8 | T u32 | H u32 | W u32
    | mask H*W bytes (0/1) | frames T*H*W float32, time-major row-major

STPF checkpoint (little-endian):
    "STPF" | version u32 = 1 | header length u64 | JSON header UTF-8 | float32 blob

Frame CSV:
    t,row,col,value

Difference map: binary PGM (P5), 8-bit. Gray 0 marks no-data cells; a
difference d maps to 128 + round(127 * clip(d / limit, -1, 1)), so 1..255 is
symmetric around 128 = no difference.
"""

import io
import json
import struct

import numpy as np

from stpf.config import FormatError
from stpf.models import FrameStack, Property

FRMS_MAGIC = b"FRMS"
STPF_MAGIC = b"STPF"
FORMAT_VERSION = 1
CSV_HEADER = "t,row,col,value"

# Sanity cap on a single extent; a larger value means a corrupt header.
_MAX_EXTENT = 1 << 24


class _Reader:
    """Sequential reader that reports the byte offset on failure."""

    def __init__(self, data: bytes, what: str) -> None:
        self.data = data
        self.what = what
        self.offset = 0

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated {field} (need {n} bytes, "
                f"{len(self.data) - self.offset} left)",
                self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, field: str):
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt), field))
        return value

    def fail(self, message: str, offset: int | None = None) -> FormatError:
        return FormatError(f"{self.what}: {message}", self.offset if offset is None else offset)

    def header(self, magic: bytes) -> None:
        if self.take(len(magic), "magic") != magic:
            raise self.fail(f"bad magic, expected {magic.decode()}", 0)
        start = self.offset
        version = self.unpack("<I", "version")
        if version != FORMAT_VERSION:
            raise self.fail(f"unsupported version {version}", start)


# --- Frame stacks ---


def parse_frames(data: bytes) -> FrameStack:
    """Decode an FRMS byte string into a FrameStack."""
    r = _Reader(data, "FRMS")
    r.header(FRMS_MAGIC)
    name_len = r.unpack("<H", "name length")
    name_at = r.offset
    try:
        prop = Property(r.take(name_len, "property name").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise r.fail(f"unknown property name ({exc})", name_at) from exc

    dims_at = r.offset
    t, h, w = (r.unpack("<I", name) for name in ("T", "H", "W"))
    if h == 0 or w == 0 or max(t, h, w) > _MAX_EXTENT:
        raise r.fail(f"implausible dimensions T={t} H={h} W={w}", dims_at)
    mask_at = r.offset
    mask = np.frombuffer(r.take(h * w, "mask"), dtype=np.uint8).reshape(h, w)
    if mask.max(initial=0) > 1:
        raise r.fail("mask bytes must be 0 or 1", mask_at)
    frames = np.frombuffer(r.take(4 * t * h * w, "frames"), dtype="<f4").reshape(t, h, w)
    if r.offset != len(data):
        raise r.fail(f"{len(data) - r.offset} trailing bytes")
    return FrameStack(prop, frames.astype(np.float32), mask.astype(bool))


def format_frames(fs: FrameStack) -> bytes:
    """Encode a FrameStack as FRMS."""
    name = fs.property.value.encode("utf-8")
    out = io.BytesIO()
    out.write(FRMS_MAGIC)
    out.write(struct.pack("<IH", FORMAT_VERSION, len(name)))
    out.write(name)
    out.write(struct.pack("<III", fs.T, fs.height, fs.width))
    out.write(fs.mask.astype(np.uint8).tobytes())
    out.write(fs.frames.astype("<f4").tobytes())
    return out.getvalue()


# --- Checkpoints ---


def parse_checkpoint(data: bytes) -> tuple[dict, np.ndarray]:
    """Decode an STPF byte string into (header, float32 blob).

    The blob length is checked against the header's ``param_count``.
    """
    r = _Reader(data, "STPF")
    r.header(STPF_MAGIC)
    size = r.unpack("<Q", "header length")
    header_at = r.offset
    try:
        header = json.loads(r.take(size, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise r.fail(f"header is not valid JSON ({exc})", header_at) from exc
    if not isinstance(header, dict) or "param_count" not in header:
        raise r.fail("header lacks param_count", header_at)

    expected = int(header["param_count"])
    blob = r.take(4 * expected, "parameter blob")
    if r.offset != len(data):
        extra = len(data) - r.offset
        raise r.fail(f"parameter blob longer than param_count={expected} ({extra} extra bytes)")
    return header, np.frombuffer(blob, dtype="<f4").astype(np.float32)


def format_checkpoint(header: dict, blob: np.ndarray) -> bytes:
    """Encode header and parameters; ``param_count`` is set from the blob."""
    flat = np.asarray(blob).reshape(-1).astype("<f4")
    doc = json.dumps({**header, "param_count": int(flat.size)}, sort_keys=True).encode("utf-8")
    return STPF_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(doc)) + doc + flat.tobytes()


# --- CSV ---


def parse_frames_csv(text: str, prop: Property) -> FrameStack:
    """Build a FrameStack from ``t,row,col,value`` rows.

    Grid extents come from the largest indices. A cell is active when it has a
    value at every time index; a cell present only at some of them is an error.
    """
    first_line, _, body = text.partition("\n")
    if first_line.strip().replace(" ", "") != CSV_HEADER:
        raise FormatError(f"CSV header must be '{CSV_HEADER}', got '{first_line.strip()}'", 0)
    body_at = len(first_line.encode("utf-8")) + 1
    try:
        rows = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"CSV body is not numeric ({exc})", body_at) from exc
    if rows.size == 0:
        raise FormatError("CSV holds no rows", body_at)
    if rows.shape[1] != 4:
        raise FormatError(f"CSV rows need 4 columns, got {rows.shape[1]}", body_at)

    idx = rows[:, :3]
    if np.any(idx < 0) or np.any(idx != np.floor(idx)):
        raise FormatError("t, row and col must be non-negative integers", body_at)
    t, r, c = (idx[:, k].astype(np.int64) for k in range(3))
    shape = (int(t.max()) + 1, int(r.max()) + 1, int(c.max()) + 1)

    frames = np.zeros(shape, dtype=np.float64)
    seen = np.zeros(shape, dtype=np.int64)
    np.add.at(seen, (t, r, c), 1)
    if seen.max() > 1:
        dup = np.argwhere(seen > 1)[0]
        raise FormatError(f"duplicate value for t={dup[0]} row={dup[1]} col={dup[2]}", body_at)
    frames[t, r, c] = rows[:, 3]

    present = seen.sum(axis=0)
    partial = (present > 0) & (present < shape[0])
    if partial.any():
        row, col = np.argwhere(partial)[0]
        raise FormatError(
            f"cell ({row}, {col}) has values at {present[row, col]} of {shape[0]} time indices",
            body_at,
        )
    return FrameStack(prop, frames, present == shape[0])


def format_frames_csv(fs: FrameStack) -> str:
    """Active cells of every frame as ``t,row,col,value`` rows."""
    lines = [CSV_HEADER]
    rows, cols = np.nonzero(fs.mask)
    for t in range(fs.T):
        for r, c in zip(rows, cols):
            lines.append(f"{t},{r},{c},{float(fs.frames[t, r, c])!r}")
    return "\n".join(lines) + "\n"


# --- Difference maps ---


def diff_to_gray(diff: np.ndarray, limit: float) -> np.ndarray:
    """Map a difference frame (NaN = no data) to 8-bit gray levels."""
    if limit <= 0:
        raise ValueError(f"limit must be positive, got {limit}")
    valid = np.isfinite(diff)
    scaled = np.clip(np.where(valid, diff, 0.0) / limit, -1.0, 1.0)
    gray = 128 + np.rint(127 * scaled)
    return np.where(valid, gray, 0).astype(np.uint8)


def format_pgm(gray: np.ndarray) -> bytes:
    """Encode a [H, W] uint8 image as binary PGM."""
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, np.uint8).tobytes()
