"""Loaders and savers for stpf.

Thin wrappers that move bytes between the filesystem and parser.py.
"""

from pathlib import Path

import numpy as np

from stpf.config import FormatError
from stpf.models import FrameStack, Property
from stpf.parser import (
    format_frames,
    format_frames_csv,
    format_pgm,
    parse_frames,
    parse_frames_csv,
)


def _read_bytes(path: Path, what: str) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path.read_bytes()


def write_bytes(path: Path, data: bytes) -> Path:
    """Write ``data``, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def load_framestack(path: Path) -> FrameStack:
    """Load an FRMS file."""
    return parse_frames(_read_bytes(path, "frame stack"))


def save_framestack(fs: FrameStack, path: Path) -> Path:
    """Write ``fs`` as FRMS."""
    return write_bytes(path, format_frames(fs))


def import_csv(path: Path, prop: Property) -> FrameStack:
    """Load a ``t,row,col,value`` CSV as a FrameStack."""
    try:
        text = _read_bytes(path, "CSV").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"CSV {path} is not valid UTF-8", exc.start) from exc
    return parse_frames_csv(text, prop)


def export_csv(fs: FrameStack, path: Path) -> Path:
    """Write the active cells of ``fs`` as ``t,row,col,value`` CSV."""
    return write_text(path, format_frames_csv(fs))


def save_pgm(gray: np.ndarray, path: Path) -> Path:
    return write_bytes(path, format_pgm(gray))


def load_checkpoint_bytes(path: Path) -> bytes:
    return _read_bytes(path, "checkpoint")
