"""Synthetic masked reservoir datasets.

A cheap stand-in for simulator output: four fields on a rectangular grid with
notched inactive corners, driven by injector and producer wells.

Every step:
  1. each field diffuses explicitly, u += alpha * lap(u), with a 5-point
     Laplacian over active neighbours only (no flux across the mask edge);
  2. injectors push gas saturation during the first half of every cycle and
     water saturation during the second half, and raise pressure;
  3. producers lower pressure;
  4. saturations are clamped to [0, 1] and rescaled to sum to 1.

Frame 0 is the initial state. Fields evolve in float64 and are stored as
float32.
"""

from __future__ import annotations

import logging

import numpy as np

from stpf.config import ConfigurationError, SynthConfig
from stpf.models import FrameStack, Property

logger = logging.getLogger(__name__)

MAX_ALPHA = 0.25

PRESETS: dict[str, dict] = {
    "desk": {
        "height": 16,
        "width": 8,
        "frames": 120,
        "notch": 2,
        "injectors": [(2, 1), (2, 6), (13, 1), (13, 6)],
        "producers": [(5, 3), (5, 4), (10, 3), (10, 4)],
    },
    "field": {
        "height": 34,
        "width": 16,
        "frames": 360,
        "notch": 3,
        "injectors": [(4, 2), (4, 13), (29, 2), (29, 13)],
        "producers": [(11, 7), (11, 8), (22, 7), (22, 8)],
    },
}


def resolve(cfg: SynthConfig) -> SynthConfig:
    """Fill unset grid, frame count and wells from the preset."""
    preset = PRESETS[cfg.preset]
    updates = {k: v for k, v in preset.items() if getattr(cfg, k) is None}
    return cfg.model_copy(update=updates)


def notched_mask(height: int, width: int, notch: int) -> np.ndarray:
    """Rectangle with a triangular notch of ``notch`` cells cut from each corner."""
    mask = np.ones((height, width), dtype=bool)
    for k in range(notch):
        span = notch - k
        for row in (k, height - 1 - k):
            mask[row, :span] = False
            mask[row, width - span:] = False
    return mask


def build_mask(cfg: SynthConfig) -> np.ndarray:
    if cfg.mask is not None:
        mask = np.asarray(cfg.mask, dtype=bool)
        if mask.shape != (cfg.height, cfg.width):
            raise ConfigurationError(
                f"mask shape {mask.shape} does not match grid {cfg.height}x{cfg.width}"
            )
        return mask
    return notched_mask(cfg.height, cfg.width, cfg.notch)


def laplacian(u: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """5-point Laplacian summed over active neighbours only.

    Opposite neighbours are paired before the sum so that a mirror-symmetric
    field gives a mirror-symmetric result bit for bit.
    """
    m = mask.astype(np.float64)
    v = np.where(mask, u, 0.0)
    up, down, left, right = (np.zeros_like(v) for _ in range(4))
    up[1:], down[:-1] = v[:-1], v[1:]
    left[:, 1:], right[:, :-1] = v[:, :-1], v[:, 1:]
    n_up, n_down, n_left, n_right = (np.zeros_like(m) for _ in range(4))
    n_up[1:], n_down[:-1] = m[:-1], m[1:]
    n_left[:, 1:], n_right[:, :-1] = m[:, :-1], m[:, 1:]
    count = (n_up + n_down) + (n_left + n_right)
    return np.where(mask, ((up + down) + (left + right)) - count * v, 0.0)


def _check(cfg: SynthConfig, mask: np.ndarray) -> None:
    if not 0.0 <= cfg.alpha <= MAX_ALPHA:
        raise ConfigurationError(
            f"alpha must be in [0, {MAX_ALPHA}] for a stable explicit step, got {cfg.alpha}"
        )
    for kind, wells in (("injector", cfg.injectors), ("producer", cfg.producers)):
        for row, col in wells:
            if not (0 <= row < cfg.height and 0 <= col < cfg.width) or not mask[row, col]:
                raise ConfigurationError(f"{kind} at ({row}, {col}) is not on an active cell")
    if abs(sum(cfg.initial_saturation) - 1.0) > 1e-9:
        raise ConfigurationError(
            f"initial saturations must sum to 1, got {cfg.initial_saturation}"
        )


def _close(sat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Clamp [3, H, W] saturations to [0, 1] and rescale them to sum to 1."""
    sat = np.clip(sat, 0.0, 1.0)
    total = sat.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    sat = np.where(total > 0, sat / safe, 1.0 / 3.0)
    return np.where(mask, sat, 0.0)


def generate(cfg: SynthConfig | None = None) -> dict[Property, FrameStack]:
    """Run the generator; returns one FrameStack per property."""
    cfg = resolve(cfg or SynthConfig())
    mask = build_mask(cfg)
    _check(cfg, mask)
    rng = np.random.default_rng(cfg.seed)
    shape = mask.shape

    pressure = cfg.initial_pressure + cfg.pressure_noise * rng.standard_normal(shape)
    sat = np.stack([s + cfg.saturation_noise * rng.standard_normal(shape)
                    for s in cfg.initial_saturation])
    pressure = np.where(mask, pressure, 0.0)
    sat = _close(sat, mask)

    frames = {p: np.zeros((cfg.frames, *shape)) for p in Property}
    inj = tuple(np.array(cfg.injectors, dtype=int).reshape(-1, 2).T)
    prod = tuple(np.array(cfg.producers, dtype=int).reshape(-1, 2).T)
    half = cfg.cycle_period // 2
    oil, gas, water = 0, 1, 2

    for k in range(cfg.frames):
        frames[Property.PRESSURE][k] = pressure
        frames[Property.OIL_SAT][k] = sat[oil]
        frames[Property.GAS_SAT][k] = sat[gas]
        frames[Property.WATER_SAT][k] = sat[water]

        pressure = pressure + cfg.alpha * laplacian(pressure, mask)
        sat = np.stack([s + cfg.alpha * laplacian(s, mask) for s in sat])
        injected = gas if (k // half) % 2 == 0 else water
        sat[injected][inj] += cfg.source_strength
        pressure[inj] += cfg.pressure_rate
        pressure[prod] -= cfg.pressure_rate
        sat = _close(sat, mask)

    logger.info(
        "generated %s dataset: %dx%d grid, %d active cells, %d frames",
        cfg.preset, cfg.height, cfg.width, int(mask.sum()), cfg.frames,
    )
    return {p: FrameStack(p, frames[p], mask) for p in Property}
