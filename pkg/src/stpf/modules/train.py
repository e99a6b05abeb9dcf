"""Training: masked MSE loss, the Nadam optimizer, the epoch loop, checkpoints.

Nadam here is the fixed-beta Nesterov-Adam update. With t = steps taken + 1:

    m = b1*m + (1-b1)*g            v = b2*v + (1-b2)*g^2
    m_hat = m / (1 - b1^(t+1))     v_hat = v / (1 - b2^t)
    g_hat = g / (1 - b1^t)
    theta -= lr * (b1*m_hat + (1-b1)*g_hat) / (sqrt(v_hat) + eps)
"""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stpf.config import (
    DimensionError,
    FormatError,
    NumericError,
    SpecMismatchError,
    TrainConfig,
    UsageError,
)
from stpf.models import (
    FrameStack,
    NormalizationSpec,
    Precision,
    Property,
    SampleSet,
    Scheme,
)
from stpf.modules.layers import Network, NetworkSpec
from stpf.modules.pipeline import gather, make_batches
from stpf.parser import format_checkpoint, parse_checkpoint
from stpf.preprocessor import load_checkpoint_bytes, write_bytes
from stpf.tensor import GradGraph, Tensor, precision, scale

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
# Magic, version and header length precede the JSON header.
HEADER_OFFSET = 16


# -- Loss --------------------------------------------------------------------


def _expand_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if shape[-mask.ndim:] == mask.shape:
        return np.broadcast_to(mask, shape)
    if shape[-1] == 1 and shape[-mask.ndim - 1:-1] == mask.shape:
        return np.broadcast_to(mask[..., np.newaxis], shape)
    raise DimensionError(f"mask {mask.shape} does not match the trailing dims of {shape}")


def mse_loss(pred: Tensor, truth: Tensor | np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over active cells, averaged over frames and batch."""
    if not isinstance(truth, Tensor):
        truth = Tensor(truth, dtype=pred.dtype)
    full = _expand_mask(mask, pred.shape)
    count = int(full.sum())
    if count == 0:
        raise UsageError("mse_loss needs at least one active cell")
    diff = pred - truth
    weight = Tensor(full, dtype=pred.dtype)
    return scale((diff * diff * weight).sum(), 1.0 / count)


# -- Optimizer ---------------------------------------------------------------


@dataclass
class NadamState:
    """Per-parameter moments and the shared step counter."""

    lr: float
    beta1: float
    beta2: float
    epsilon: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def create(cls, params: list[Tensor], config: TrainConfig | None = None) -> NadamState:
        config = config or TrainConfig()
        return cls(
            lr=config.lr,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def nadam_step(state: NadamState, params: list[Tensor], grads: list[np.ndarray]) -> None:
    """Apply one update to every parameter in place of its data."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError(
            f"nadam_step got {len(params)} params, {len(grads)} grads, state for {len(state.m)}"
        )
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name or p.shape}'")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m_corr = 1.0 - b1 ** (t + 1)
    v_corr = 1.0 - b2**t
    g_corr = 1.0 - b1**t
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / m_corr
        v_hat = state.v[k] / v_corr
        g_hat = g / g_corr
        update = state.lr * (b1 * m_hat + (1.0 - b1) * g_hat) / (np.sqrt(v_hat) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype)
    state.t = t


# -- Training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    network: Network
    history: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train(
    network: Network,
    samples: SampleSet,
    stack: FrameStack,
    config: TrainConfig | None = None,
) -> TrainResult:
    """Fit ``network`` on windows of the normalized ``stack``.

    Records the batch-size-weighted mean loss of every epoch. Aborts with
    NumericError naming the epoch and batch if the loss or a gradient is
    not finite.
    """
    config = config or TrainConfig()
    if samples.is_empty:
        raise UsageError("training needs at least one sample; the stack is shorter than a window")

    history: list[float] = []
    started = time.perf_counter()
    with precision(config.precision):
        network.cast(config.precision.value)
        params = network.trainable()
        state = NadamState.create(params, config)
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            total, seen = 0.0, 0
            batches = make_batches(samples, config.batch, config.seed, epoch)
            for b, idx in enumerate(batches, start=1):
                x, y = gather(stack, samples, idx)
                network.zero_grad()
                loss = mse_loss(network.forward(Tensor(x), mode="train"), y, stack.mask)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"loss is {value} at epoch {epoch}, batch {b}")
                graph = GradGraph(loss)
                graph.backward()
                try:
                    nadam_step(state, params, [graph.gradient(p) for p in params])
                except NumericError as exc:
                    raise NumericError(f"{exc} at epoch {epoch}, batch {b}") from exc
                total += value * len(idx)
                seen += len(idx)
                logger.debug("epoch %d batch %d/%d loss %.6g", epoch, b, len(batches), value)
            history.append(total / seen)
            logger.info(
                "epoch %d/%d mean loss %.6g (%.2fs)",
                epoch, config.epochs, history[-1], time.perf_counter() - epoch_start,
            )
    seconds = time.perf_counter() - started
    logger.info("training finished in %.2fs", seconds)
    return TrainResult(network=network, history=history, seconds=seconds)


# -- Checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    """A trained network together with everything needed to reuse it."""

    network: Network
    normalization: NormalizationSpec
    mask: np.ndarray
    property: Property
    seed: int
    window: int
    scheme: Scheme = Scheme.OVERLAPPING
    train_frames: int | None = None
    loss_history: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.loss_history)

    def check_stack(self, fs: FrameStack) -> None:
        """Raise SpecMismatchError unless ``fs`` is the data this model was trained on."""
        if fs.property is not self.property:
            raise SpecMismatchError(
                f"checkpoint is for {self.property.value}, frames are {fs.property.value}"
            )
        if fs.mask.shape != self.mask.shape or not np.array_equal(fs.mask, self.mask):
            raise SpecMismatchError("frame mask differs from the checkpoint's mask")


def _header(ckpt: Checkpoint) -> dict:
    mask = np.asarray(ckpt.mask, dtype=bool)
    spec = ckpt.network.spec
    return {
        "version": CHECKPOINT_VERSION,
        "property": ckpt.property.value,
        "layers": [layer.model_dump(mode="json") for layer in spec.layers],
        "cell_kind": spec.cell_kind.value,
        "in_channels": spec.in_channels,
        "memory_filters": spec.memory_filters,
        "normalization": ckpt.normalization.to_dict(),
        "mask": base64.b64encode(np.packbits(mask).tobytes()).decode("ascii"),
        "mask_shape": list(mask.shape),
        "seed": ckpt.seed,
        "epochs": ckpt.epochs,
        "loss_history": [float(v) for v in ckpt.loss_history],
        "window": ckpt.window,
        "scheme": ckpt.scheme.value,
        "train_frames": ckpt.train_frames,
    }


def checkpoint_save(ckpt: Checkpoint, path: Path) -> Path:
    """Write an STPF checkpoint; parameters are stored as float32."""
    blob = ckpt.network.flat_parameters().astype(np.float32)
    return write_bytes(path, format_checkpoint(_header(ckpt), blob))


def checkpoint_load(path: Path) -> Checkpoint:
    """Read an STPF checkpoint into a float32 network."""
    data = load_checkpoint_bytes(path)
    header, blob = parse_checkpoint(data)
    blob_at = len(data) - 4 * blob.size
    try:
        if header["version"] != CHECKPOINT_VERSION:
            version = header["version"]
            raise FormatError(f"unsupported checkpoint version {version}", HEADER_OFFSET)
        spec = NetworkSpec.model_validate(
            {
                "layers": header["layers"],
                "cell_kind": header["cell_kind"],
                "in_channels": header["in_channels"],
                "memory_filters": header.get("memory_filters"),
            }
        )
        prop = Property(header["property"])
        shape = tuple(header["mask_shape"])
        bits = np.frombuffer(base64.b64decode(header["mask"]), dtype=np.uint8)
        mask = np.unpackbits(bits)[: int(np.prod(shape))].reshape(shape).astype(bool)
        normalization = NormalizationSpec.from_dict(prop, header["normalization"])
        seed = int(header["seed"])
        window = int(header["window"])
        scheme = Scheme(header["scheme"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(
            f"checkpoint header is incomplete or invalid ({exc})", HEADER_OFFSET
        ) from exc

    with precision(Precision.SINGLE):
        network = Network(spec, seed=seed)
    if blob.size != network.param_count:
        raise FormatError(
            f"parameter blob holds {blob.size} values, architecture needs {network.param_count}",
            blob_at,
        )
    network.load_flat(blob)
    return Checkpoint(
        network=network,
        normalization=normalization,
        mask=mask,
        property=prop,
        seed=seed,
        window=window,
        scheme=scheme,
        train_frames=header.get("train_frames"),
        loss_history=[float(v) for v in header.get("loss_history", [])],
    )
