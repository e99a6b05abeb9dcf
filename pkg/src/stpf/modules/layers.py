"""Recurrent and convolutional layers and the forecasting network.

The default network maps a window of L frames to L frames:

    BN(1) -> recurrent(16, 3x3) -> BN(16) -> recurrent(8, 3x3) -> BN(8)
          -> Conv3D(4, 3x3x3, relu) -> Conv3D(1, 1x1x1, sigmoid)

The recurrent cell is either the 4-gate convLSTM (gate order i, f, g, o, no
peepholes) or the dual-memory ST-LSTM. Tensors run channel-first inside the
network: [B, L, C, H, W] for sequences, [B, C, H, W] for single steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from stpf.config import DEFAULT_SEED, ConfigurationError, DimensionError, SpecMismatchError
from stpf.models import CellKind
from stpf.tensor import (
    Tensor,
    activation,
    batch_norm,
    concat,
    conv2d_same,
    conv3d_same,
    no_grad,
    permute,
    select,
    slice_axis,
    stack,
)

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
FORGET_BIAS = 1.0

Mode = Literal["train", "infer"]


# ---------------------------------------------------------------------------
# Architecture description
# ---------------------------------------------------------------------------


class LayerKind(str, Enum):
    BATCH_NORM = "batch_norm"
    RECURRENT = "recurrent"
    CONV3D = "conv3d"


class LayerSpec(BaseModel):
    """One layer of the stack. ``filters`` and ``kernel`` are unused for batch norm."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    filters: int | None = Field(default=None, ge=1)
    kernel: tuple[int, ...] = ()
    activation: Literal["relu", "sigmoid"] | None = None


@dataclass(frozen=True)
class ParamRow:
    label: str
    total: int
    trainable: int


@dataclass(frozen=True)
class ParamReport:
    """Per-layer parameter counts, one row per recurrent or Conv3D layer plus batch norm."""

    rows: list[ParamRow] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.total for r in self.rows)

    @property
    def trainable(self) -> int:
        return sum(r.trainable for r in self.rows)

    def format_table(self) -> str:
        width = max([len("Trainable"), *(len(r.label) for r in self.rows)])
        lines = [f"{'Layer':<{width}}  {'Parameters':>10}"]
        lines += [f"{r.label:<{width}}  {r.total:>10}" for r in self.rows]
        lines.append(f"{'Total':<{width}}  {self.total:>10}")
        lines.append(f"{'Trainable':<{width}}  {self.trainable:>10}")
        return "\n".join(lines)


class NetworkSpec(BaseModel):
    """Ordered layer list plus the recurrent cell kind.

    ``memory_filters`` is the ST-LSTM spatial-memory width shared by every
    recurrent layer; it defaults to the first recurrent layer's filters.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: tuple[LayerSpec, ...]
    cell_kind: CellKind = CellKind.CONVLSTM
    in_channels: int = Field(default=1, ge=1)
    memory_filters: int | None = Field(default=None, ge=1)

    @classmethod
    def default(
        cls,
        cell_kind: CellKind | str = CellKind.CONVLSTM,
        filters: tuple[int, int] = (16, 8),
        conv_filters: int = 4,
        kernel: int = 3,
    ) -> NetworkSpec:
        bn = LayerSpec(kind=LayerKind.BATCH_NORM)
        return cls(
            cell_kind=CellKind(cell_kind),
            layers=(
                bn,
                LayerSpec(kind=LayerKind.RECURRENT, filters=filters[0], kernel=(kernel, kernel)),
                bn,
                LayerSpec(kind=LayerKind.RECURRENT, filters=filters[1], kernel=(kernel, kernel)),
                bn,
                LayerSpec(
                    kind=LayerKind.CONV3D,
                    filters=conv_filters,
                    kernel=(kernel, kernel, kernel),
                    activation="relu",
                ),
                LayerSpec(kind=LayerKind.CONV3D, filters=1, kernel=(1, 1, 1), activation="sigmoid"),
            ),
        )

    @property
    def recurrent_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.kind is LayerKind.RECURRENT]

    def spatial_memory(self) -> int:
        if self.memory_filters is not None:
            return self.memory_filters
        rec = self.recurrent_indices
        return self.layers[rec[0]].filters if rec else 0

    def check(self) -> None:
        """Raise ConfigurationError unless the stack can be built."""
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        for i, s in enumerate(self.layers):
            if s.kind is LayerKind.BATCH_NORM:
                continue
            rank = 2 if s.kind is LayerKind.RECURRENT else 3
            if s.filters is None or len(s.kernel) != rank:
                raise ConfigurationError(
                    f"layer {i} ({s.kind.value}) needs filters and a {rank}-d kernel"
                )
            if any(k < 1 or k % 2 == 0 for k in s.kernel):
                raise ConfigurationError(f"layer {i}: kernel extents must be odd, got {s.kernel}")
        if self.cell_kind is CellKind.STLSTM and not self.recurrent_indices:
            raise ConfigurationError("an ST-LSTM network needs at least one recurrent layer")
        if self.layers[-1].kind is not LayerKind.CONV3D or self.layers[-1].filters != 1:
            raise ConfigurationError("the last layer must be a single-filter Conv3D")

    def channels(self) -> list[int]:
        """Input channel count of every layer."""
        out, c = [], self.in_channels
        for s in self.layers:
            out.append(c)
            if s.kind is not LayerKind.BATCH_NORM:
                c = s.filters
        return out

    def param_count(self) -> ParamReport:
        cell_label = "convLSTM" if self.cell_kind is CellKind.CONVLSTM else "ST-LSTM"
        fm = self.spatial_memory()
        rows: list[ParamRow] = []
        bn_total = bn_trainable = 0
        n_rec = n_conv = 0
        for s, c in zip(self.layers, self.channels()):
            if s.kind is LayerKind.BATCH_NORM:
                bn_total += 4 * c
                bn_trainable += 2 * c
                continue
            kk = int(np.prod(s.kernel))
            f = s.filters
            if s.kind is LayerKind.RECURRENT:
                n_rec += 1
                if self.cell_kind is CellKind.CONVLSTM:
                    count = 4 * f * (kk * (c + f) + 1)
                else:
                    count = stlstm_param_count(c, f, fm, kk)
                rows.append(ParamRow(f"{cell_label} {n_rec}", count, count))
            else:
                n_conv += 1
                count = f * (kk * c + 1)
                rows.append(ParamRow(f"3D convolution {n_conv}", count, count))
        if bn_total:
            rows.append(ParamRow("All batch normalizations", bn_total, bn_trainable))
        return ParamReport(rows)


def stlstm_param_count(c: int, f: int, fm: int, kk: int) -> int:
    temporal = kk * 3 * f * (c + f) + 3 * f
    spatial = kk * 3 * fm * (c + fm) + 3 * fm
    output = kk * f * (c + 2 * f + fm) + f
    fusion = f * (f + fm)
    return temporal + spatial + output + fusion


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot(shape: tuple[int, ...], rng: np.random.Generator, name: str) -> Tensor:
    """Uniform in +/- sqrt(6 / (fan_in + fan_out)) for a [out, in, *k] kernel."""
    receptive = int(np.prod(shape[2:]))
    limit = np.sqrt(6.0 / ((shape[0] + shape[1]) * receptive))
    data = rng.uniform(-limit, limit, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _bias(size: int, name: str, forget: slice | None = None) -> Tensor:
    data = np.zeros(size)
    if forget is not None:
        data[forget] = FORGET_BIAS
    return Tensor(data, requires_grad=True, name=name)


def _chunks(t: Tensor, n: int) -> list[Tensor]:
    width = t.shape[1] // n
    return [slice_axis(t, 1, k * width, (k + 1) * width) for k in range(n)]


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor


class ConvLSTMCell:
    """4-gate convolutional LSTM.

    i = sigmoid(Wxi*x + Whi*h + bi)     f = sigmoid(Wxf*x + Whf*h + bf)
    g = tanh(Wxg*x + Whg*h + bg)        o = sigmoid(Wxo*x + Who*h + bo)
    c' = f*c + i*g                      h' = o*tanh(c')
    """

    def __init__(
        self,
        in_channels: int,
        filters: int,
        kernel: tuple[int, int],
        rng: np.random.Generator,
        name: str = "convlstm",
    ) -> None:
        self.in_channels = in_channels
        self.filters = filters
        f4 = 4 * filters
        self.w_x = glorot((f4, in_channels, *kernel), rng, f"{name}.w_x")
        self.w_h = glorot((f4, filters, *kernel), rng, f"{name}.w_h")
        self.b = _bias(f4, f"{name}.b", forget=slice(filters, 2 * filters))

    def parameters(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]

    def zero_state(self, batch: int, height: int, width: int) -> ConvLSTMState:
        zeros = np.zeros((batch, self.filters, height, width), dtype=self.w_x.dtype)
        return ConvLSTMState(h=Tensor(zeros, dtype=zeros.dtype), c=Tensor(zeros, dtype=zeros.dtype))

    def step(self, x: Tensor, state: ConvLSTMState) -> ConvLSTMState:
        """One time step on x [B, C_in, H, W]."""
        if x.ndim != 4 or state.h.shape[2:] != x.shape[2:]:
            raise DimensionError(f"step input {x.shape} does not conform to state {state.h.shape}")
        z = conv2d_same(x, self.w_x, self.b) + conv2d_same(state.h, self.w_h)
        zi, zf, zg, zo = _chunks(z, 4)
        i, f, o = zi.sigmoid(), zf.sigmoid(), zo.sigmoid()
        g = zg.tanh()
        c = f * state.c + i * g
        return ConvLSTMState(h=o * c.tanh(), c=c)


@dataclass
class STLSTMState:
    h: Tensor
    c: Tensor


class STLSTMCell:
    """Spatio-temporal LSTM with a temporal memory C and a spatial memory M.

    temporal:  g, i, f from x and h;     c' = f*c + i*g
    spatial:   g', i', f' from x and m;  m' = f'*m + i'*g'
    output:    o = sigmoid(Wxo*x + Who*h + Wco*c' + Wmo*m' + bo)
               h' = o * tanh(W1x1 * [c', m'])
    """

    def __init__(
        self,
        in_channels: int,
        filters: int,
        memory_filters: int,
        kernel: tuple[int, int],
        rng: np.random.Generator,
        name: str = "stlstm",
    ) -> None:
        self.in_channels = in_channels
        self.filters = filters
        self.memory_filters = memory_filters
        f, fm = filters, memory_filters
        self.w_xt = glorot((3 * f, in_channels, *kernel), rng, f"{name}.w_xt")
        self.w_ht = glorot((3 * f, f, *kernel), rng, f"{name}.w_ht")
        self.b_t = _bias(3 * f, f"{name}.b_t", forget=slice(2 * f, 3 * f))
        self.w_xs = glorot((3 * fm, in_channels, *kernel), rng, f"{name}.w_xs")
        self.w_ms = glorot((3 * fm, fm, *kernel), rng, f"{name}.w_ms")
        self.b_s = _bias(3 * fm, f"{name}.b_s", forget=slice(2 * fm, 3 * fm))
        self.w_xo = glorot((f, in_channels, *kernel), rng, f"{name}.w_xo")
        self.w_ho = glorot((f, f, *kernel), rng, f"{name}.w_ho")
        self.w_co = glorot((f, f, *kernel), rng, f"{name}.w_co")
        self.w_mo = glorot((f, fm, *kernel), rng, f"{name}.w_mo")
        self.b_o = _bias(f, f"{name}.b_o")
        self.w_fuse = glorot((f, f + fm, 1, 1), rng, f"{name}.w_fuse")

    def parameters(self) -> list[Tensor]:
        return [
            self.w_xt, self.w_ht, self.b_t,
            self.w_xs, self.w_ms, self.b_s,
            self.w_xo, self.w_ho, self.w_co, self.w_mo, self.b_o,
            self.w_fuse,
        ]

    def zero_state(self, batch: int, height: int, width: int) -> STLSTMState:
        zeros = np.zeros((batch, self.filters, height, width), dtype=self.w_xt.dtype)
        return STLSTMState(h=Tensor(zeros, dtype=zeros.dtype), c=Tensor(zeros, dtype=zeros.dtype))

    def zero_memory(self, batch: int, height: int, width: int) -> Tensor:
        shape = (batch, self.memory_filters, height, width)
        return Tensor(np.zeros(shape), dtype=self.w_xt.dtype)

    def step(self, x: Tensor, state: STLSTMState, m: Tensor) -> tuple[STLSTMState, Tensor]:
        """One time step; ``m`` is the spatial memory arriving from below."""
        if x.ndim != 4 or state.h.shape[2:] != x.shape[2:] or m.shape[2:] != x.shape[2:]:
            raise DimensionError(
                f"step input {x.shape} does not conform to state {state.h.shape} / memory {m.shape}"
            )
        zt = conv2d_same(x, self.w_xt, self.b_t) + conv2d_same(state.h, self.w_ht)
        zg, zi, zf = _chunks(zt, 3)
        c = zf.sigmoid() * state.c + zi.sigmoid() * zg.tanh()

        zs = conv2d_same(x, self.w_xs, self.b_s) + conv2d_same(m, self.w_ms)
        zg_s, zi_s, zf_s = _chunks(zs, 3)
        m_new = zf_s.sigmoid() * m + zi_s.sigmoid() * zg_s.tanh()

        zo = (
            conv2d_same(x, self.w_xo, self.b_o)
            + conv2d_same(state.h, self.w_ho)
            + conv2d_same(c, self.w_co)
            + conv2d_same(m_new, self.w_mo)
        )
        fused = conv2d_same(concat([c, m_new], axis=1), self.w_fuse)
        h = zo.sigmoid() * fused.tanh()
        return STLSTMState(h=h, c=c), m_new


# ---------------------------------------------------------------------------
# Feed-forward layers
# ---------------------------------------------------------------------------


class BatchNorm:
    """Per-channel batch normalization with moving statistics.

    moving = moving * momentum + batch * (1 - momentum), biased batch variance.
    """

    def __init__(
        self,
        channels: int,
        momentum: float = BN_MOMENTUM,
        epsilon: float = BN_EPSILON,
        name: str = "bn",
    ) -> None:
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.moving_mean = np.zeros(channels, dtype=self.gamma.dtype)
        self.moving_var = np.ones(channels, dtype=self.gamma.dtype)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, axis: int, mode: Mode = "infer") -> Tensor:
        training = mode == "train"
        out, mean, var = batch_norm(
            x,
            self.gamma,
            self.beta,
            axis=axis,
            epsilon=self.epsilon,
            training=training,
            moving_mean=self.moving_mean,
            moving_var=self.moving_var,
        )
        if training:
            dtype = self.moving_mean.dtype
            self.moving_mean = (
                self.moving_mean * self.momentum + mean * (1.0 - self.momentum)
            ).astype(dtype)
            self.moving_var = (
                self.moving_var * self.momentum + var * (1.0 - self.momentum)
            ).astype(dtype)
        return out


class Conv3D:
    """Same-padded 3-D convolution over (time, row, col) with an activation."""

    def __init__(
        self,
        in_channels: int,
        filters: int,
        kernel: tuple[int, int, int],
        activation: str,
        rng: np.random.Generator,
        name: str = "conv3d",
    ) -> None:
        self.activation = activation
        self.w = glorot((filters, in_channels, *kernel), rng, f"{name}.w")
        self.b = _bias(filters, f"{name}.b")

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        """x [B, C, L, H, W] -> [B, F, L, H, W]."""
        return activation(self.activation, conv3d_same(x, self.w, self.b))


Layer = BatchNorm | ConvLSTMCell | STLSTMCell | Conv3D


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """The layer stack described by a NetworkSpec, with seeded initialization.

    Parameters are created in the precision active at construction time.
    """

    def __init__(self, spec: NetworkSpec | None = None, seed: int = DEFAULT_SEED) -> None:
        self.spec = spec or NetworkSpec.default()
        self.spec.check()
        self.seed = seed
        rng = np.random.default_rng(seed)
        fm = self.spec.spatial_memory()
        self.layers: list[Layer] = []
        for i, (s, c) in enumerate(zip(self.spec.layers, self.spec.channels())):
            name = f"layer{i}"
            if s.kind is LayerKind.BATCH_NORM:
                self.layers.append(BatchNorm(c, name=name))
            elif s.kind is LayerKind.RECURRENT and self.spec.cell_kind is CellKind.CONVLSTM:
                self.layers.append(ConvLSTMCell(c, s.filters, s.kernel, rng, name=name))
            elif s.kind is LayerKind.RECURRENT:
                self.layers.append(STLSTMCell(c, s.filters, fm, s.kernel, rng, name=name))
            else:
                self.layers.append(
                    Conv3D(c, s.filters, s.kernel, s.activation or "relu", rng, name=name)
                )
        logger.debug(
            "built %s network with %d parameters (seed %d)",
            self.spec.cell_kind.value, self.param_count, seed,
        )

    @property
    def dtype(self) -> np.dtype:
        return self.trainable()[0].dtype

    @property
    def param_count(self) -> int:
        return sum(a.size for a in self.parameter_arrays())

    def trainable(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_arrays(self) -> list[np.ndarray]:
        """Every parameter in blob order: layer by layer, BN as gamma, beta, mean, var."""
        arrays: list[np.ndarray] = []
        for layer in self.layers:
            arrays.extend(p.data for p in layer.parameters())
            if isinstance(layer, BatchNorm):
                arrays.extend([layer.moving_mean, layer.moving_var])
        return arrays

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.parameter_arrays()])

    def load_flat(self, blob: np.ndarray) -> None:
        """Overwrite every parameter from a flat blob, keeping the network's dtype."""
        blob = np.asarray(blob).reshape(-1)
        if blob.size != self.param_count:
            raise SpecMismatchError(
                f"parameter blob holds {blob.size} values, network needs {self.param_count}"
            )
        dtype = self.dtype
        offset = 0
        for layer in self.layers:
            for p in layer.parameters():
                p.data = blob[offset:offset + p.size].reshape(p.shape).astype(dtype)
                offset += p.size
            if isinstance(layer, BatchNorm):
                n = layer.channels
                layer.moving_mean = blob[offset:offset + n].astype(dtype)
                layer.moving_var = blob[offset + n:offset + 2 * n].astype(dtype)
                offset += 2 * n

    def cast(self, dtype: np.dtype | str) -> None:
        """Convert every parameter to ``dtype`` in place."""
        for layer in self.layers:
            for p in layer.parameters():
                p.data = p.data.astype(dtype)
                p.grad = None
            if isinstance(layer, BatchNorm):
                layer.moving_mean = layer.moving_mean.astype(dtype)
                layer.moving_var = layer.moving_var.astype(dtype)

    def zero_grad(self) -> None:
        for p in self.trainable():
            p.zero_grad()

    # --- Forward ---

    def forward(self, window: Tensor, mode: Mode = "infer") -> Tensor:
        """[B, L, H, W, 1] -> [B, L, H, W, 1], values in (0, 1)."""
        if window.ndim != 5 or window.shape[-1] != self.spec.in_channels:
            raise DimensionError(
                f"network input must be [B, L, H, W, {self.spec.in_channels}], got {window.shape}"
            )
        x = permute(window, (0, 1, 4, 2, 3))
        if self.spec.cell_kind is CellKind.CONVLSTM:
            for layer in self.layers:
                x = self._apply_sequence(layer, x, mode)
        else:
            rec = self.spec.recurrent_indices
            first, last = rec[0], rec[-1]
            for layer in self.layers[:first]:
                x = self._apply_sequence(layer, x, mode)
            x = self._interleaved(self.layers[first:last + 1], x, mode)
            for layer in self.layers[last + 1:]:
                x = self._apply_sequence(layer, x, mode)
        return permute(x, (0, 1, 3, 4, 2))

    def _apply_sequence(self, layer: Layer, x: Tensor, mode: Mode) -> Tensor:
        """Apply one layer to a whole [B, L, C, H, W] sequence."""
        if isinstance(layer, BatchNorm):
            return layer(x, axis=2, mode=mode)
        if isinstance(layer, Conv3D):
            y = layer(permute(x, (0, 2, 1, 3, 4)))
            return permute(y, (0, 2, 1, 3, 4))
        if isinstance(layer, STLSTMCell):
            return self._interleaved([layer], x, mode)
        b, steps, _, h, w = x.shape
        state = layer.zero_state(b, h, w)
        outputs = []
        for t in range(steps):
            state = layer.step(select(x, 1, t), state)
            outputs.append(state.h)
        return stack(outputs, axis=1)

    def _interleaved(self, block: list[Layer], x: Tensor, mode: Mode) -> Tensor:
        """Run a block of ST-LSTM layers step by step along the zigzag memory path.

        Within a step M rises through the layers; the top layer's M at t-1
        enters the bottom layer at t. Batch norm inside the block is per step.
        """
        b, steps, _, h, w = x.shape
        cells = [layer for layer in block if isinstance(layer, STLSTMCell)]
        states = {id(cell): cell.zero_state(b, h, w) for cell in cells}
        m = cells[0].zero_memory(b, h, w)
        outputs = []
        for t in range(steps):
            y = select(x, 1, t)
            for layer in block:
                if isinstance(layer, BatchNorm):
                    y = layer(y, axis=1, mode=mode)
                else:
                    state, m = layer.step(y, states[id(layer)], m)
                    states[id(layer)] = state
                    y = state.h
            outputs.append(y)
        return stack(outputs, axis=1)

    def predict(self, window: np.ndarray) -> np.ndarray:
        """Inference on raw arrays [B, L, H, W, 1] without recording a graph."""
        with no_grad():
            out = self.forward(Tensor(window, dtype=self.dtype), mode="infer")
        return out.data


def build_network(
    cell_kind: CellKind | str = CellKind.CONVLSTM,
    seed: int = DEFAULT_SEED,
) -> Network:
    """The default stack for ``cell_kind``, in the current precision."""
    return Network(NetworkSpec.default(cell_kind), seed=seed)
