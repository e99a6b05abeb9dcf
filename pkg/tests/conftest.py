"""Shared fixtures for stpf tests."""

import numpy as np
import pytest

from stpf.config import RunConfig, Settings
from stpf.models import FrameStack, Property
from stpf.modules.layers import NetworkSpec
from stpf.tensor import precision


@pytest.fixture
def settings(tmp_path):
    """Settings rooted in tmp_path, independent of the caller's environment."""
    return Settings(data_dir=tmp_path / "data", out_dir=tmp_path / "runs", threads=2)


@pytest.fixture
def run_config(tmp_path):
    """A small run: short window, two epochs, paths inside tmp_path."""
    return RunConfig(
        data_dir=tmp_path / "data",
        out_dir=tmp_path / "runs",
        window=3,
        train_frames=20,
        train={"epochs": 2, "batch": 4},
    )


@pytest.fixture
def double_precision():
    with precision("float64"):
        yield


@pytest.fixture
def tiny_spec():
    """Shrunken default stack: recurrent filters (2, 1), Conv3D 2 filters."""
    return NetworkSpec.default(filters=(2, 1), conv_filters=2)


@pytest.fixture
def notched_mask():
    mask = np.ones((6, 4), dtype=bool)
    mask[0, 0] = mask[0, 3] = mask[5, 0] = mask[5, 3] = False
    return mask


@pytest.fixture
def pressure_stack(notched_mask):
    """30 frames of a smooth travelling wave around 2000 psi."""
    t = np.arange(30)[:, None, None]
    r = np.arange(6)[None, :, None]
    c = np.arange(4)[None, None, :]
    frames = 2000.0 + 50.0 * np.sin(0.3 * t + 0.5 * r) * np.cos(0.4 * c) + t
    return FrameStack(Property.PRESSURE, frames, notched_mask)


@pytest.fixture
def read_pgm():
    """Decoder for the binary PGM images the evaluate step writes."""

    def read(data: bytes) -> np.ndarray:
        magic, size, depth, pixels = data.split(b"\n", 3)
        assert (magic, depth) == (b"P5", b"255")
        w, h = (int(v) for v in size.split())
        assert len(pixels) == w * h
        return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)

    return read
