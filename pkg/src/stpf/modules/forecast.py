"""Forecasting and error metrics.

Single-frame predictions come from one forward pass per window: the last
output frame for the overlapping scheme, the first for the non-overlapping
scheme. Rollout feeds every prediction back into the window.

Metrics are computed on denormalized values over active cells:

    MSE    mean squared difference
    NRMSE  100 * sqrt(MSE) / (truth max - truth min)
    SSIM   ((2 mx my + c1)(2 sxy + c2)) / ((mx^2 + my^2 + c1)(sx^2 + sy^2 + c2))

SSIM uses global statistics with the N-1 divisor, no sliding window.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol

import numpy as np

from stpf.config import (
    DegenerateRangeError,
    DimensionError,
    SpecMismatchError,
    SSIMConfig,
    UsageError,
)
from stpf.models import FrameStack, MetricRecord, MetricSeries, Scheme
from stpf.modules.pipeline import make_samples

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 16
SUMMARY_MONTHS = 12


class Forecaster(Protocol):
    """Anything mapping windows [B, L, H, W, 1] to windows of the same shape."""

    def predict(self, window: np.ndarray) -> np.ndarray: ...


def _pick(out: np.ndarray, scheme: Scheme) -> np.ndarray:
    """The single-frame prediction of each output window, [B, H, W]."""
    index = -1 if Scheme(scheme) is Scheme.OVERLAPPING else 0
    return out[:, index, :, :, 0]


# -- Prediction --------------------------------------------------------------


def predict_training_frames(
    net: Forecaster,
    stack: FrameStack,
    window: int,
    scheme: Scheme | str = Scheme.OVERLAPPING,
) -> FrameStack:
    """Predict frames window..T-1 of ``stack``, one forward pass each.

    Prediction k uses input frames [k, k+window-1] and is aligned to frame
    k+window, so the result holds T - window frames.
    """
    if stack.T < window + 1:
        raise UsageError(f"need at least {window + 1} frames to predict, got {stack.T}")
    started = time.perf_counter()
    ss = make_samples(stack, window, Scheme.OVERLAPPING)
    starts = [s.input_start for s in ss.samples]
    frames: list[np.ndarray] = []
    for k in range(0, len(starts), PREDICT_CHUNK):
        batch = np.stack([stack.frames[i:i + window] for i in starts[k:k + PREDICT_CHUNK]])
        out = np.asarray(net.predict(batch[..., np.newaxis]))
        if out.shape != batch.shape + (1,):
            raise DimensionError(f"forecaster returned {out.shape} for input {batch.shape}")
        frames.extend(_pick(out, scheme))
    logger.info(
        "predicted %d training frames in %.2fs", len(frames), time.perf_counter() - started
    )
    return stack.with_frames(np.stack(frames))


def rollout(
    net: Forecaster,
    seed: FrameStack,
    horizon: int,
    scheme: Scheme | str = Scheme.OVERLAPPING,
    window: int | None = None,
) -> FrameStack:
    """Autoregressive forecast of ``horizon`` frames after the seed window.

    Each predicted frame is appended to the window and the oldest frame is
    dropped; after ``window`` steps the input is entirely self-predicted.
    """
    if horizon < 0:
        raise UsageError(f"horizon must be >= 0, got {horizon}")
    if window is not None and seed.T != window:
        raise UsageError(f"seed window must hold {window} frames, got {seed.T}")
    if seed.T < 1:
        raise UsageError("seed window is empty")
    started = time.perf_counter()
    current = np.array(seed.frames)
    predicted = np.zeros((horizon, seed.height, seed.width), dtype=np.float32)
    for n in range(horizon):
        out = np.asarray(net.predict(current[np.newaxis, ..., np.newaxis]))
        frame = np.where(seed.mask, _pick(out, scheme)[0], 0.0).astype(np.float32)
        predicted[n] = frame
        current = np.concatenate([current[1:], frame[np.newaxis]])
    logger.info("rolled out %d frames in %.2fs", horizon, time.perf_counter() - started)
    return seed.with_frames(predicted)


# -- Metrics -----------------------------------------------------------------


def _cells(frame: np.ndarray, mask: np.ndarray, region: str = "active") -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != mask.shape:
        raise DimensionError(f"frame {frame.shape} does not match mask {mask.shape}")
    return frame.reshape(-1) if region == "rectangle" else frame[mask]


def masked_mse(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    p, t = _cells(pred, mask), _cells(truth, mask)
    if p.size == 0:
        raise UsageError("no active cells")
    d = p - t
    return float(np.mean(d * d))


def nrmse(
    pred: np.ndarray,
    truth: np.ndarray,
    mask: np.ndarray,
    range_min: float,
    range_max: float,
) -> float:
    """Percentage RMSE relative to the ground-truth value range."""
    if not range_max > range_min:
        raise DegenerateRangeError(f"NRMSE range is degenerate: [{range_min}, {range_max}]")
    return float(100.0 * np.sqrt(masked_mse(pred, truth, mask)) / (range_max - range_min))


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    cfg: SSIMConfig | None = None,
    data_range: float | None = None,
) -> float:
    """Global SSIM of two frames.

    Without explicit constants or ``data_range``, c1 and c2 derive from the
    joint value range of both frames.
    """
    cfg = cfg or SSIMConfig()
    a, b = _cells(x, mask, cfg.region), _cells(y, mask, cfg.region)
    if a.size < 2:
        raise UsageError(f"SSIM needs at least 2 cells, got {a.size}")
    if data_range is None and (cfg.c1 is None or cfg.c2 is None):
        both = np.concatenate([a, b])
        data_range = float(both.max() - both.min())
    c1, c2 = cfg.constants(data_range)

    mx, my = a.mean(), b.mean()
    dx, dy = a - mx, b - my
    n1 = a.size - 1
    vx = np.sum(dx * dx) / n1
    vy = np.sum(dy * dy) / n1
    cov = np.sum(dx * dy) / n1
    num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(num / den)


def diff_map(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """pred - truth on active cells, NaN (no data) elsewhere."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != mask.shape or t.shape != mask.shape:
        raise DimensionError(f"frames {p.shape}/{t.shape} do not match mask {mask.shape}")
    return np.where(mask, p - t, np.nan)


def _value_range(fs: FrameStack) -> tuple[float, float]:
    values = fs.active_values().astype(np.float64)
    if values.size == 0:
        raise DegenerateRangeError(f"{fs.property.value}: no active values to take a range over")
    return float(values.min()), float(values.max())


def metric_series(
    pred: FrameStack,
    truth: FrameStack,
    cfg: SSIMConfig | None = None,
    start: int = 0,
    value_range: tuple[float, float] | None = None,
    threads: int = 1,
) -> MetricSeries:
    """One metric record per frame; ``start`` is the frame index of the first one.

    ``value_range`` defaults to the min and max of ``truth`` and sets both
    the NRMSE denominator and the SSIM data range.
    """
    cfg = cfg or SSIMConfig()
    if pred.T != truth.T:
        raise UsageError(f"prediction has {pred.T} frames, ground truth {truth.T}")
    if pred.mask.shape != truth.mask.shape or not np.array_equal(pred.mask, truth.mask):
        raise SpecMismatchError("prediction and ground truth masks differ")
    lo, hi = value_range if value_range is not None else _value_range(truth)
    if not hi > lo:
        raise DegenerateRangeError(
            f"{truth.property.value}: ground-truth range is degenerate ([{lo}, {hi}])"
        )
    mask = truth.mask

    def record(k: int) -> MetricRecord:
        p, t = pred.frames[k], truth.frames[k]
        mse = masked_mse(p, t, mask)
        return MetricRecord(
            frame=start + k,
            mse=mse,
            rmse=float(np.sqrt(mse)),
            nrmse_pct=float(nrmse(p, t, mask, lo, hi)),
            ssim=ssim(p, t, mask, cfg, data_range=hi - lo),
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        records = list(pool.map(record, range(pred.T)))
    return MetricSeries(records=records)


def difference_stack(pred: FrameStack, truth: FrameStack) -> tuple[FrameStack, float]:
    """Raw pred - truth frames plus the symmetric gray-scale limit for them.

    The limit is the largest absolute difference, or 1.0 if every difference
    is zero.
    """
    if pred.T != truth.T:
        raise UsageError(f"prediction has {pred.T} frames, ground truth {truth.T}")
    diff = pred.frames.astype(np.float64) - truth.frames.astype(np.float64)
    active = np.abs(diff[:, truth.mask])
    limit = float(active.max()) if active.size else 0.0
    return truth.with_frames(diff), (limit if limit > 0 else 1.0)


def format_summary(series: MetricSeries, label: str, first: int = SUMMARY_MONTHS) -> str:
    """Plain-text summary: early-horizon and full-horizon means."""
    n = len(series)
    head = min(first, n)
    lines = [
        f"{label}: {n} frames",
        f"mean SSIM  (first {head}): {series.mean('ssim', first):.6f}",
        f"mean NRMSE (first {head}): {series.mean('nrmse_pct', first):.6f} %",
        f"mean SSIM  (all {n}): {series.mean('ssim'):.6f}",
        f"mean NRMSE (all {n}): {series.mean('nrmse_pct'):.6f} %",
    ]
    return "\n".join(lines) + "\n"
