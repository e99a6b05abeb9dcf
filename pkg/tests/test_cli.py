"""Tests for the stpf CLI."""

import numpy as np
import pytest

from stpf.cli import main
from stpf.models import FrameStack, Property
from stpf.modules.synthgen import notched_mask
from stpf.parser import parse_frames
from stpf.preprocessor import save_framestack

SMALL_RUN = """\
window: 3
train_frames: 20
train:
  batch: 5
synth:
  height: 8
  width: 6
  frames: 30
  notch: 1
  injectors: [[2, 1]]
  producers: [[5, 4]]
"""


@pytest.fixture
def run(tmp_path, monkeypatch):
    """Flags pointing a small synthetic run at tmp_path."""
    for var in ("STPF_DATA_DIR", "STPF_OUT_DIR", "STPF_THREADS", "STPF_LOG_LEVEL"):
        monkeypatch.delenv(var, raising=False)
    config = tmp_path / "run.yaml"
    config.write_text(SMALL_RUN)
    return [
        "--config", str(config),
        "--data", str(tmp_path / "data"),
        "--out", str(tmp_path / "runs"),
    ]


@pytest.fixture
def trained(run, tmp_path):
    main(["synth", *run])
    main(["train", *run, "--epochs", "1"])
    return tmp_path / "runs" / "pressure"


def test_synth_writes_every_property(run, tmp_path, capsys):
    main(["synth", *run])

    out = capsys.readouterr().out
    assert out.count("sha256=") == 4
    assert "30x8x6" in out
    assert "active=44" in out
    for prop in Property:
        fs = parse_frames((tmp_path / "data" / f"{prop.value}.frms").read_bytes())
        assert fs.property is prop
        assert fs.T == 30


def test_synth_is_reproducible(run, tmp_path):
    main(["synth", *run, "--seed", "7"])
    first = (tmp_path / "data" / "pressure.frms").read_bytes()
    main(["synth", *run, "--seed", "7"])
    assert (tmp_path / "data" / "pressure.frms").read_bytes() == first
    main(["synth", *run, "--seed", "8"])
    assert (tmp_path / "data" / "pressure.frms").read_bytes() != first


def test_train_writes_checkpoint_and_loss(capsys, trained):
    out = capsys.readouterr().out
    assert "convLSTM 1" in out
    assert "17773" in out
    assert (trained / "model.stpf").is_file()
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,mean_loss"
    assert len(rows) == 2
    assert rows[1].startswith("1,")


def test_params(capsys):
    main(["params"])
    out = capsys.readouterr().out
    assert "9856" in out and "6944" in out
    assert "17773" in out and "17723" in out


def test_params_stlstm(capsys):
    main(["params", "--cell-kind", "stlstm"])
    assert "ST-LSTM 1" in capsys.readouterr().out


def test_predict_rollout_and_evaluate(trained, run):
    main(["predict", *run, "--mode", "rollout"])
    pred = parse_frames((trained / "pred-rollout.frms").read_bytes())
    assert pred.T == 10
    assert pred.property is Property.PRESSURE

    main(["evaluate", *run, "--mode", "rollout"])
    report = trained / "eval-rollout"
    rows = (report / "metrics.csv").read_text().splitlines()
    assert rows[0] == "frame,mse,rmse,nrmse_pct,ssim"
    assert len(rows) == 11
    assert rows[1].startswith("20,")
    assert len(list(report.glob("diff_*.pgm"))) == 10
    assert (report / "diff_0020.pgm").is_file()
    assert (report / "diff.frms").is_file()
    assert "mean SSIM" in (report / "summary.txt").read_text()


def test_predict_training_frames(trained, run):
    main(["predict", *run, "--mode", "train-frames"])
    pred = parse_frames((trained / "pred-train-frames.frms").read_bytes())
    assert pred.T == 17

    main(["evaluate", *run, "--mode", "train-frames"])
    assert (trained / "eval-train-frames" / "diff_0003.pgm").is_file()


def test_predict_horizon_zero(trained, run, capsys):
    main(["predict", *run, "--horizon", "0"])
    assert "0 predicted frames" in capsys.readouterr().out
    assert parse_frames((trained / "pred-rollout.frms").read_bytes()).T == 0


def test_predict_long_horizon(trained, run):
    main(["predict", *run, "--horizon", "60"])
    pred = parse_frames((trained / "pred-rollout.frms").read_bytes())
    assert pred.T == 60


def test_missing_frames_exit_code(run, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", *run])
    assert exc.value.code == 2
    assert "not found" in capsys.readouterr().err


def test_evaluate_without_prediction(trained, run):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", *run])
    assert exc.value.code == 2


def test_checkpoint_property_mismatch(trained, run, tmp_path, capsys):
    other = tmp_path / "runs" / "oil_sat"
    other.mkdir(parents=True)
    (other / "model.stpf").write_bytes((trained / "model.stpf").read_bytes())
    with pytest.raises(SystemExit) as exc:
        main(["predict", *run, "--property", "oil_sat"])
    assert exc.value.code == 2
    assert "checkpoint is for pressure" in capsys.readouterr().err


def test_constant_pressure_exit_code(run, tmp_path):
    mask = notched_mask(8, 6, 1)
    save_framestack(
        FrameStack(Property.PRESSURE, np.full((30, 8, 6), 2000.0), mask),
        tmp_path / "data" / "pressure.frms",
    )
    with pytest.raises(SystemExit) as exc:
        main(["train", *run, "--epochs", "1"])
    assert exc.value.code == 2


def test_non_finite_data_exit_code(run, tmp_path, capsys):
    frames = np.full((30, 8, 6), 0.3)
    frames[:, 3, 3] = np.nan
    save_framestack(
        FrameStack(Property.GAS_SAT, frames, notched_mask(8, 6, 1)),
        tmp_path / "data" / "gas_sat.frms",
    )
    with pytest.raises(SystemExit) as exc:
        main(["train", *run, "--property", "gas_sat", "--epochs", "1"])
    assert exc.value.code == 3
    assert "epoch 1" in capsys.readouterr().err


def test_bad_config_key(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text("windw: 3\n")
    with pytest.raises(SystemExit) as exc:
        main(["params", "--config", str(config)])
    assert exc.value.code == 2


def test_import_csv(run, tmp_path, capsys):
    csv = tmp_path / "sat.csv"
    csv.write_text("t,row,col,value\n0,0,0,0.1\n0,0,1,0.2\n1,0,0,0.3\n1,0,1,0.4\n")
    main(["import-csv", str(csv), "--property", "gas_sat", *run])

    fs = parse_frames((tmp_path / "data" / "gas_sat.frms").read_bytes())
    assert fs.property is Property.GAS_SAT
    assert fs.frames.shape == (2, 1, 2)
    assert "2x1x2" in capsys.readouterr().out


def test_import_csv_partial_cell(run, tmp_path, capsys):
    csv = tmp_path / "bad.csv"
    csv.write_text("t,row,col,value\n0,0,0,1\n0,0,1,2\n1,0,0,3\n")
    with pytest.raises(SystemExit) as exc:
        main(["import-csv", str(csv), *run])
    assert exc.value.code == 2
    assert "byte offset" in capsys.readouterr().err


def test_import_csv_invalid_utf8(run, tmp_path, capsys):
    csv = tmp_path / "bad.csv"
    csv.write_bytes(b"t,row,col,value\n0,0,0,1\xff\xfe\n")
    with pytest.raises(SystemExit) as exc:
        main(["import-csv", str(csv), *run])
    assert exc.value.code == 2
    assert "UTF-8" in capsys.readouterr().err


def test_config_invalid_utf8(tmp_path, capsys):
    config = tmp_path / "run.json"
    config.write_bytes(b'{"window": "\xff"}')
    with pytest.raises(SystemExit) as exc:
        main(["params", "--config", str(config)])
    assert exc.value.code == 2
    assert "UTF-8" in capsys.readouterr().err


def test_unwritable_output_exit_code(run, tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(SystemExit) as exc:
        main(["synth", *run, "--data", str(blocker / "data")])
    assert exc.value.code == 2
    assert capsys.readouterr().err.startswith("Error:")


def test_export_csv(run, tmp_path, capsys):
    main(["synth", *run])
    capsys.readouterr()
    main(["export-csv", *run, "--property", "gas_sat"])
    csv = tmp_path / "data" / "gas_sat.csv"
    assert "1320 rows" in capsys.readouterr().out
    assert csv.read_text().startswith("t,row,col,value\n")

    main(["import-csv", str(csv), *run, "--property", "gas_sat",
          "--output", str(tmp_path / "again.frms")])
    original = parse_frames((tmp_path / "data" / "gas_sat.frms").read_bytes())
    again = parse_frames((tmp_path / "again.frms").read_bytes())
    assert again.frames.tobytes() == original.frames.tobytes()


def test_export_csv_of_a_prediction(trained, run, tmp_path):
    main(["predict", *run, "--horizon", "3"])
    main(["export-csv", str(trained / "pred-rollout.frms"), *run])
    rows = (trained / "pred-rollout.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 44


SUBCOMMAND_FLAGS = {
    "synth": ["--preset"],
    "train": ["--property", "--all", "--window", "--epochs", "--cell-kind"],
    "predict": ["--property", "--all", "--window", "--mode", "--horizon"],
    "evaluate": ["--property", "--all", "--window", "--mode"],
    "params": ["--cell-kind"],
    "import-csv": ["--property", "--output"],
    "export-csv": ["--property", "--output"],
}
COMMON_FLAGS = ["--config", "--data", "--out", "--seed", "--verbose"]


@pytest.mark.parametrize("command", sorted(SUBCOMMAND_FLAGS))
def test_help_lists_flags(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in COMMON_FLAGS + SUBCOMMAND_FLAGS[command]:
        assert flag in out


@pytest.mark.parametrize("command", sorted(SUBCOMMAND_FLAGS))
def test_unknown_flag_rejected(command, tmp_path, capsys):
    positional = [str(tmp_path / "x.csv")] if command == "import-csv" else []
    with pytest.raises(SystemExit) as exc:
        main([command, *positional, "--no-such-flag"])
    assert exc.value.code == 2
    assert "--no-such-flag" in capsys.readouterr().err


def test_rerun_is_byte_identical(trained, run):
    outputs = [
        trained / "model.stpf",
        trained / "loss.csv",
        trained / "pred-rollout.frms",
        trained / "eval-rollout" / "metrics.csv",
        trained / "eval-rollout" / "diff.frms",
        trained / "eval-rollout" / "diff_0020.pgm",
    ]

    def snapshot():
        main(["predict", *run])
        main(["evaluate", *run])
        return [path.read_bytes() for path in outputs]

    first = snapshot()
    main(["train", *run, "--epochs", "1"])
    assert snapshot() == first
