"""Frame preparation: normalization, chronological split, sample windows, batches.

Pressure is min-max scaled with statistics of the training frames only;
saturations already live in [0, 1] and pass through unchanged. Sample windows
follow two schemes:

  overlapping     input [i, i+L-1] -> output [i+1, i+L]
  nonoverlapping  input [i, i+L-1] -> output [i+L, i+2L-1]

Both slide by ``stride`` frames (1 by default).
"""

from __future__ import annotations

import logging

import numpy as np

from stpf.config import DegenerateRangeError, UsageError
from stpf.models import FrameStack, NormalizationSpec, NormKind, Sample, SampleSet, Scheme

logger = logging.getLogger(__name__)


# -- Normalization -----------------------------------------------------------


def normalize(
    fs: FrameStack,
    train_frames: int | None = None,
) -> tuple[FrameStack, NormalizationSpec]:
    """Scale ``fs`` into [0, 1] using its first ``train_frames`` frames.

    Frames after the training portion are scaled with the same constants and
    may fall outside [0, 1].
    """
    if not fs.property.is_saturation:
        n = fs.T if train_frames is None else train_frames
        if n < 1 or n > fs.T:
            raise UsageError(f"normalization needs 1..{fs.T} training frames, got {n}")
        values = fs.frames[:n, fs.mask].astype(np.float64)
        if values.size == 0:
            raise DegenerateRangeError(f"{fs.property.value}: no active cells to normalize")
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            raise DegenerateRangeError(
                f"{fs.property.value}: training range is degenerate (min == max == {lo})"
            )
        spec = NormalizationSpec(fs.property, NormKind.MINMAX, min=lo, max=hi)
        scaled = (fs.frames.astype(np.float64) - lo) / (hi - lo)
        logger.debug("normalized %s with min=%g max=%g", fs.property.value, lo, hi)
        return fs.with_frames(scaled), spec
    return fs, NormalizationSpec(fs.property, NormKind.IDENTITY)


def apply_normalization(fs: FrameStack, spec: NormalizationSpec) -> FrameStack:
    """Scale ``fs`` with constants fixed earlier, e.g. read from a checkpoint."""
    if spec.kind is NormKind.IDENTITY:
        return fs
    if not spec.max > spec.min:
        raise DegenerateRangeError(f"normalization range is degenerate: [{spec.min}, {spec.max}]")
    return fs.with_frames((fs.frames.astype(np.float64) - spec.min) / (spec.max - spec.min))


def denormalize(fs: FrameStack, spec: NormalizationSpec) -> FrameStack:
    """Invert ``normalize``; inactive cells stay 0."""
    if spec.kind is NormKind.IDENTITY:
        return fs
    scaled = fs.frames.astype(np.float64) * (spec.max - spec.min) + spec.min
    return fs.with_frames(scaled)


# -- Split -------------------------------------------------------------------


def split(fs: FrameStack, train_frames: int) -> tuple[FrameStack, FrameStack]:
    """Chronological split into (first train_frames, the rest)."""
    if not 0 < train_frames < fs.T:
        raise UsageError(f"train_frames must be in 1..{fs.T - 1}, got {train_frames}")
    return fs.slice(0, train_frames), fs.slice(train_frames, fs.T)


# -- Samples -----------------------------------------------------------------


def sample_count(frame_count: int, window: int, scheme: Scheme, stride: int = 1) -> int:
    """Number of windows ``make_samples`` cuts; 0 when the stack is too short."""
    span = window + 1 if Scheme(scheme) is Scheme.OVERLAPPING else 2 * window
    if frame_count < span:
        return 0
    return (frame_count - span) // stride + 1


def make_samples(
    fs: FrameStack | int,
    window: int,
    scheme: Scheme | str = Scheme.OVERLAPPING,
    stride: int = 1,
) -> SampleSet:
    """Cut input/output window pairs from a stack (or a bare frame count).

    A stack too short for a single window yields an empty SampleSet.
    """
    scheme = Scheme(scheme)
    if window < 1:
        raise UsageError(f"window must be >= 1, got {window}")
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    total = fs if isinstance(fs, int) else fs.T
    shift = 1 if scheme is Scheme.OVERLAPPING else window
    n = sample_count(total, window, scheme, stride)
    samples = tuple(Sample(i * stride, i * stride + shift, window) for i in range(n))
    if not samples:
        logger.warning(
            "%d frames are too few for a %s window of %d; no samples", total, scheme.value, window
        )
    return SampleSet(scheme, window, stride, total, samples)


def make_batches(ss: SampleSet, batch: int, seed: int, epoch: int = 0) -> list[list[int]]:
    """Shuffle sample indices with a per-epoch seed and cut them into batches.

    The final batch keeps the remainder.
    """
    if batch < 1:
        raise UsageError(f"batch must be >= 1, got {batch}")
    order = np.random.default_rng([seed, epoch]).permutation(len(ss))
    return [order[k:k + batch].tolist() for k in range(0, len(order), batch)]


def gather(
    fs: FrameStack,
    ss: SampleSet,
    indices: list[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack the chosen samples into (inputs, targets), each [S, L, H, W, 1]."""
    chosen = range(len(ss)) if indices is None else indices
    inputs = np.stack([fs.frames[list(ss.samples[i].input_indices)] for i in chosen])
    targets = np.stack([fs.frames[list(ss.samples[i].output_indices)] for i in chosen])
    return inputs[..., np.newaxis], targets[..., np.newaxis]
