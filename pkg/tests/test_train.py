"""Tests for the loss, the Nadam optimizer, the training loop and checkpoints."""

import numpy as np
import pytest

from stpf.config import (
    DimensionError,
    FormatError,
    NumericError,
    SpecMismatchError,
    SynthConfig,
    TrainConfig,
    UsageError,
)
from stpf.models import FrameStack, Precision, Property, Scheme
from stpf.modules.layers import Network
from stpf.modules.pipeline import make_samples, normalize
from stpf.modules.synthgen import generate
from stpf.modules.train import (
    HEADER_OFFSET,
    Checkpoint,
    NadamState,
    checkpoint_load,
    checkpoint_save,
    mse_loss,
    nadam_step,
    train,
)
from stpf.parser import format_checkpoint, parse_checkpoint
from stpf.tensor import Tensor


def nadam_oracle(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-7, theta=0.0):
    """Scalar fixed-beta Nesterov-Adam, written out step by step."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** (t + 1))
        v_hat = v / (1 - b2**t)
        g_hat = g / (1 - b1**t)
        theta -= lr * (b1 * m_hat + (1 - b1) * g_hat) / (np.sqrt(v_hat) + eps)
    return theta


def _scalar_param(value=0.0):
    return Tensor(np.array([value]), requires_grad=True, dtype=np.float64, name="theta")


@pytest.fixture
def checkpoint(tiny_spec, pressure_stack):
    net = Network(tiny_spec, seed=3)
    scaled, norm = normalize(pressure_stack, 20)
    result = train(net, make_samples(scaled.slice(0, 20), 3), scaled, TrainConfig(epochs=1))
    return Checkpoint(
        network=result.network,
        normalization=norm,
        mask=np.asarray(pressure_stack.mask),
        property=Property.PRESSURE,
        seed=3,
        window=3,
        train_frames=20,
        loss_history=result.history,
    )


# --- Loss ---


class TestMSE:
    def test_hand_example(self):
        loss = mse_loss(Tensor([0.5, 0.5]), np.array([0.0, 1.0]), np.ones(2, dtype=bool))
        assert loss.item() == pytest.approx(0.25)

    def test_inactive_cells_ignored(self):
        pred = Tensor(np.zeros((1, 1, 2, 2, 1)))
        truth = np.zeros((1, 1, 2, 2, 1))
        truth[0, 0, 0, 0, 0] = 100.0
        mask = np.array([[False, True], [True, True]])
        assert mse_loss(pred, truth, mask).item() == 0.0

    def test_averages_over_frames_and_batch(self):
        pred = Tensor(np.ones((2, 3, 2, 2, 1)))
        mask = np.array([[True, False], [True, True]])
        assert mse_loss(pred, np.zeros((2, 3, 2, 2, 1)), mask).item() == pytest.approx(1.0)

    def test_empty_mask(self):
        with pytest.raises(UsageError):
            mse_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)), np.zeros((2, 2), bool))

    def test_mask_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 2, 2)), np.ones((3, 3), bool))


# --- Nadam ---


class TestNadam:
    def test_first_step(self, double_precision):
        theta = _scalar_param()
        state = NadamState.create([theta])
        nadam_step(state, [theta], [np.array([1.0])])
        assert abs(theta.data[0] - nadam_oracle([1.0])) < 1e-12
        assert state.t == 1

    def test_random_sequences(self, double_precision):
        rng = np.random.default_rng(11)
        for _ in range(10):
            grads = rng.standard_normal(100)
            start = rng.standard_normal()
            theta = _scalar_param(start)
            state = NadamState.create([theta], TrainConfig(lr=1e-2))
            for g in grads:
                nadam_step(state, [theta], [np.array([g])])
            assert abs(theta.data[0] - nadam_oracle(grads, lr=1e-2, theta=start)) < 1e-10

    def test_zero_gradient_keeps_params(self, double_precision):
        theta = _scalar_param(0.7)
        state = NadamState.create([theta])
        for _ in range(5):
            nadam_step(state, [theta], [np.zeros(1)])
        assert theta.data[0] == 0.7

    def test_non_finite_gradient(self, double_precision):
        theta = _scalar_param()
        state = NadamState.create([theta])
        with pytest.raises(NumericError, match="theta"):
            nadam_step(state, [theta], [np.array([np.nan])])
        assert theta.data[0] == 0.0
        assert state.t == 0

    def test_gradient_shape_mismatch(self):
        theta = _scalar_param()
        state = NadamState.create([theta])
        with pytest.raises(DimensionError):
            nadam_step(state, [theta], [np.zeros(2)])


# --- Training loop ---


class TestTrain:
    def test_short_run(self, tiny_spec, pressure_stack):
        scaled, _ = normalize(pressure_stack, 20)
        samples = make_samples(scaled.slice(0, 20), 3)
        result = train(Network(tiny_spec, seed=1), samples, scaled, TrainConfig(epochs=3))
        assert len(result.history) == 3
        assert all(np.isfinite(result.history))
        assert result.seconds > 0

    def test_deterministic(self, tiny_spec, pressure_stack):
        scaled, _ = normalize(pressure_stack, 20)
        samples = make_samples(scaled.slice(0, 20), 3)
        config = TrainConfig(epochs=2, batch=4, seed=9)
        a = train(Network(tiny_spec, seed=1), samples, scaled, config)
        b = train(Network(tiny_spec, seed=1), samples, scaled, config)
        assert a.history == b.history
        assert a.network.flat_parameters().tobytes() == b.network.flat_parameters().tobytes()

    def test_double_precision_run(self, tiny_spec, pressure_stack):
        scaled, _ = normalize(pressure_stack, 20)
        samples = make_samples(scaled.slice(0, 20), 3)
        config = TrainConfig(epochs=1, precision=Precision.DOUBLE)
        result = train(Network(tiny_spec), samples, scaled, config)
        assert result.network.dtype == np.float64

    def test_no_samples(self, tiny_spec, pressure_stack):
        with pytest.raises(UsageError, match="at least one sample"):
            train(Network(tiny_spec), make_samples(3, 3), pressure_stack)

    def test_nan_input_reports_location(self, tiny_spec, notched_mask):
        frames = np.full((8, 6, 4), 0.5)
        frames[:, 2, 2] = np.nan
        fs = FrameStack(Property.GAS_SAT, frames, notched_mask)
        with pytest.raises(NumericError, match="epoch 1, batch 1"):
            train(Network(tiny_spec), make_samples(fs, 3), fs, TrainConfig(epochs=1))

    @pytest.mark.slow
    def test_desk_dataset_learns(self):
        stack = generate(SynthConfig(preset="desk", seed=42))[Property.PRESSURE]
        scaled, _ = normalize(stack, 100)
        samples = make_samples(scaled.slice(0, 100), 10)
        result = train(Network(seed=42), samples, scaled, TrainConfig(epochs=30))
        assert result.history[-1] <= 0.5 * result.history[0]


# --- Checkpoints ---


class TestCheckpoint:
    def test_roundtrip_predictions_bit_identical(self, checkpoint, tmp_path):
        window = np.random.default_rng(0).uniform(size=(2, 3, 6, 4, 1)).astype(np.float32)
        before = checkpoint.network.predict(window)
        path = checkpoint_save(checkpoint, tmp_path / "model.stpf")
        loaded = checkpoint_load(path)
        assert loaded.network.predict(window).tobytes() == before.tobytes()

    def test_roundtrip_metadata(self, checkpoint, tmp_path):
        loaded = checkpoint_load(checkpoint_save(checkpoint, tmp_path / "model.stpf"))
        assert loaded.property is Property.PRESSURE
        assert (loaded.seed, loaded.window, loaded.train_frames) == (3, 3, 20)
        assert loaded.scheme is Scheme.OVERLAPPING
        assert loaded.epochs == 1
        assert loaded.loss_history == pytest.approx(checkpoint.loss_history)
        assert loaded.normalization == checkpoint.normalization
        np.testing.assert_array_equal(loaded.mask, checkpoint.mask)

    def test_default_network_blob(self, pressure_stack, tmp_path):
        ckpt = Checkpoint(
            network=Network(seed=0),
            normalization=normalize(pressure_stack)[1],
            mask=np.asarray(pressure_stack.mask),
            property=Property.PRESSURE,
            seed=0,
            window=10,
        )
        path = checkpoint_save(ckpt, tmp_path / "model.stpf")
        loaded = checkpoint_load(path)
        assert loaded.network.flat_parameters().size == 17773
        assert loaded.network.param_count == 17773

    def test_header_layout(self, checkpoint, tmp_path):
        header, blob = parse_checkpoint(
            checkpoint_save(checkpoint, tmp_path / "model.stpf").read_bytes()
        )
        spec = checkpoint.network.spec
        assert isinstance(header["layers"], list)
        assert len(header["layers"]) == len(spec.layers)
        assert header["layers"][1]["kind"] == spec.layers[1].kind.value
        assert header["cell_kind"] == "convlstm"
        assert header["in_channels"] == 1
        assert "memory_filters" in header
        assert header["param_count"] == blob.size == checkpoint.network.param_count

    def test_truncated_file(self, checkpoint, tmp_path):
        path = checkpoint_save(checkpoint, tmp_path / "model.stpf")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            checkpoint_load(path)

    def test_architecture_mismatch(self, checkpoint, tmp_path):
        checkpoint.network = Network(seed=0)
        data = checkpoint_save(checkpoint, tmp_path / "model.stpf").read_bytes()
        tampered = data.replace(b'"filters": 16', b'"filters": 15', 1)
        (tmp_path / "bad.stpf").write_bytes(tampered)
        with pytest.raises(FormatError, match="architecture needs"):
            checkpoint_load(tmp_path / "bad.stpf")

    def test_incomplete_header(self, tmp_path):
        (tmp_path / "bad.stpf").write_bytes(format_checkpoint({"version": 1}, np.zeros(3)))
        with pytest.raises(FormatError) as exc:
            checkpoint_load(tmp_path / "bad.stpf")
        assert exc.value.offset == HEADER_OFFSET

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            checkpoint_load(tmp_path / "nope.stpf")

    def test_check_stack(self, checkpoint, pressure_stack, notched_mask):
        checkpoint.check_stack(pressure_stack)
        with pytest.raises(SpecMismatchError, match="pressure"):
            checkpoint.check_stack(
                FrameStack(Property.OIL_SAT, pressure_stack.frames, notched_mask)
            )
        other = np.ones_like(notched_mask)
        with pytest.raises(SpecMismatchError, match="mask"):
            checkpoint.check_stack(FrameStack(Property.PRESSURE, pressure_stack.frames, other))
