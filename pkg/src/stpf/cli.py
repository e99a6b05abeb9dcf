"""Command-line interface for stpf.

    stpf synth       generate a synthetic dataset (one FRMS file per property)
    stpf train       fit one model per property, write checkpoint and loss.csv
    stpf predict     predict training frames or roll out a blind forecast
    stpf evaluate    per-frame metrics, difference maps and a summary
    stpf params      print the parameter table of the default network
    stpf import-csv  convert a t,row,col,value CSV into an FRMS file
    stpf export-csv  write an FRMS file as t,row,col,value CSV

Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure.
"""

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from stpf.config import (
    ALL_PROPERTIES,
    InputError,
    NumericError,
    RunConfig,
    SpecMismatchError,
    StpfError,
    UsageError,
    get_settings,
    load_run_config,
)
from stpf.models import FrameStack, Property

logger = logging.getLogger("stpf")

PREDICT_MODES = ("train-frames", "rollout")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config document, environment settings and flags."""
    seed = getattr(args, "seed", None)
    overrides = {
        "data_dir": getattr(args, "data", None),
        "out_dir": getattr(args, "out", None),
        "property": getattr(args, "property", None),
        "window": getattr(args, "window", None),
        "horizon": getattr(args, "horizon", None),
        "cell_kind": getattr(args, "cell_kind", None),
        "seed": seed,
        "train.seed": seed,
        "synth.seed": seed,
        "train.epochs": getattr(args, "epochs", None),
        "synth.preset": getattr(args, "preset", None),
    }
    return load_run_config(args.config, settings=args.settings, overrides=overrides)


def _properties(args: argparse.Namespace, cfg: RunConfig) -> tuple[Property, ...]:
    return ALL_PROPERTIES if getattr(args, "all", False) else (cfg.property,)


def _load_frames(cfg: RunConfig, prop: Property) -> FrameStack:
    from stpf.preprocessor import load_framestack

    fs = load_framestack(cfg.frames_path(prop))
    if fs.property is not prop:
        raise SpecMismatchError(
            f"{cfg.frames_path(prop)} holds {fs.property.value}, expected {prop.value}"
        )
    return fs


# -- synth -------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> None:
    from stpf.modules.synthgen import generate
    from stpf.preprocessor import save_framestack

    cfg = _resolve_config(args)
    stacks = generate(cfg.synth)
    for prop in ALL_PROPERTIES:
        fs = stacks[prop]
        path = save_framestack(fs, cfg.frames_path(prop))
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        print(f"{path}  {fs.T}x{fs.height}x{fs.width}  active={fs.n_active}  sha256={digest}")


# -- train -------------------------------------------------------------------


def _format_loss_csv(history: list[float]) -> str:
    rows = ["epoch,mean_loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(history, start=1)]
    return "\n".join(rows) + "\n"


def cmd_train(args: argparse.Namespace) -> None:
    from stpf.modules.layers import Network, NetworkSpec
    from stpf.modules.pipeline import make_samples, normalize, split
    from stpf.modules.train import Checkpoint, checkpoint_save, train
    from stpf.preprocessor import write_text
    from stpf.tensor import precision

    cfg = _resolve_config(args)
    for prop in _properties(args, cfg):
        fs = _load_frames(cfg, prop)
        n_train = cfg.resolve_train_frames(fs.T)
        train_fs, _ = split(fs, n_train)
        norm_fs, norm = normalize(train_fs)
        samples = make_samples(norm_fs, cfg.window, cfg.scheme, cfg.stride)
        if samples.is_empty:
            raise UsageError(
                f"{prop.value}: {n_train} training frames are too few for window {cfg.window}"
            )

        spec = NetworkSpec.default(cfg.cell_kind)
        with precision(cfg.train.precision):
            net = Network(spec, seed=cfg.seed)
        print(f"{prop.value}: {cfg.cell_kind.value} network, {len(samples)} samples")
        print(spec.param_count().format_table())

        result = train(net, samples, norm_fs, cfg.train)
        ckpt = Checkpoint(
            network=result.network,
            normalization=norm,
            mask=fs.mask,
            property=prop,
            seed=cfg.seed,
            window=cfg.window,
            scheme=cfg.scheme,
            train_frames=n_train,
            loss_history=result.history,
        )
        path = checkpoint_save(ckpt, cfg.checkpoint_path(prop))
        write_text(cfg.loss_csv_path(prop), _format_loss_csv(result.history))
        print(f"{prop.value}: final loss {result.history[-1]:.6g} -> {path}")


# -- predict -----------------------------------------------------------------


def cmd_predict(args: argparse.Namespace) -> None:
    from stpf.modules.forecast import predict_training_frames, rollout
    from stpf.modules.pipeline import apply_normalization, denormalize
    from stpf.modules.train import checkpoint_load
    from stpf.preprocessor import save_framestack

    cfg = _resolve_config(args)
    for prop in _properties(args, cfg):
        ckpt = checkpoint_load(cfg.checkpoint_path(prop))
        fs = _load_frames(cfg, prop)
        ckpt.check_stack(fs)
        n_train = ckpt.train_frames or cfg.resolve_train_frames(fs.T)
        if not ckpt.window < n_train <= fs.T:
            raise UsageError(f"{prop.value}: cannot seed a {ckpt.window}-frame window "
                             f"from {n_train} training frames of {fs.T}")
        if cfg.window != ckpt.window:
            logger.warning("using the checkpoint window %d, not %d", ckpt.window, cfg.window)
        norm_fs = apply_normalization(fs, ckpt.normalization)

        if args.mode == "train-frames":
            pred = predict_training_frames(
                ckpt.network, norm_fs.slice(0, n_train), ckpt.window, ckpt.scheme
            )
        else:
            horizon = cfg.horizon if cfg.horizon is not None else fs.T - n_train
            seed = norm_fs.slice(n_train - ckpt.window, n_train)
            pred = rollout(ckpt.network, seed, horizon, ckpt.scheme, window=ckpt.window)

        path = save_framestack(
            denormalize(pred, ckpt.normalization), cfg.prediction_path(prop, args.mode)
        )
        print(f"{prop.value}: {pred.T} predicted frames -> {path}")


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(args: argparse.Namespace) -> None:
    from stpf.modules.forecast import difference_stack, format_summary, metric_series
    from stpf.modules.train import checkpoint_load
    from stpf.parser import diff_to_gray
    from stpf.preprocessor import load_framestack, save_framestack, save_pgm, write_text

    cfg = _resolve_config(args)
    for prop in _properties(args, cfg):
        truth_all = _load_frames(cfg, prop)
        ckpt = checkpoint_load(cfg.checkpoint_path(prop))
        pred = load_framestack(cfg.prediction_path(prop, args.mode))
        if pred.property is not prop:
            raise SpecMismatchError(f"prediction holds {pred.property.value}, not {prop.value}")
        n_train = ckpt.train_frames or cfg.resolve_train_frames(truth_all.T)
        start = ckpt.window if args.mode == "train-frames" else n_train
        if start + pred.T > truth_all.T:
            raise UsageError(
                f"{prop.value}: {pred.T} predicted frames from frame {start} run past "
                f"the {truth_all.T} ground-truth frames"
            )
        truth = truth_all.slice(start, start + pred.T)
        values = truth_all.active_values()
        series = metric_series(
            pred,
            truth,
            cfg.ssim,
            start=start,
            value_range=(float(values.min()), float(values.max())),
            threads=args.settings.threads,
        )

        out = cfg.report_dir(prop, args.mode)
        write_text(out / "metrics.csv", series.to_csv())
        diff, limit = difference_stack(pred, truth)
        save_framestack(diff, out / "diff.frms")
        for k in range(diff.T):
            gray = diff_to_gray(np.where(diff.mask, diff.frames[k], np.nan), limit)
            save_pgm(gray, out / f"diff_{start + k:04d}.pgm")
        summary = format_summary(series, f"{prop.value} {args.mode}")
        write_text(out / "summary.txt", summary)
        print(summary, end="")
        print(f"reports -> {out}")


# -- params / import-csv / export-csv ----------------------------------------


def cmd_params(args: argparse.Namespace) -> None:
    from stpf.modules.layers import NetworkSpec

    cfg = _resolve_config(args)
    print(NetworkSpec.default(cfg.cell_kind).param_count().format_table())


def cmd_import_csv(args: argparse.Namespace) -> None:
    from stpf.preprocessor import import_csv, save_framestack

    cfg = _resolve_config(args)
    fs = import_csv(args.csv, cfg.property)
    path = save_framestack(fs, args.output or cfg.frames_path(cfg.property))
    print(f"{path}  {fs.T}x{fs.height}x{fs.width}  active={fs.n_active}")


def cmd_export_csv(args: argparse.Namespace) -> None:
    from stpf.preprocessor import export_csv, load_framestack

    cfg = _resolve_config(args)
    source = args.frames or cfg.frames_path(cfg.property)
    fs = load_framestack(source)
    path = export_csv(fs, args.output or source.with_suffix(".csv"))
    print(f"{path}  {fs.property.value}  {fs.T * fs.n_active} rows")


# -- parser ------------------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="Run configuration document (JSON or YAML).")
    common.add_argument("--data", type=Path, default=None,
                        help="Directory of FRMS frame stacks (overrides STPF_DATA_DIR).")
    common.add_argument("--out", type=Path, default=None,
                        help="Directory for checkpoints and reports (overrides STPF_OUT_DIR).")
    common.add_argument("--seed", type=int, default=None, help="Seed for data and training.")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="Log progress to stderr (-v info, -vv debug).")
    return common


def _property_flags() -> argparse.ArgumentParser:
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--property", choices=[p.value for p in Property], default=None,
                       help="Property to work on (default: pressure).")
    flags.add_argument("--all", action="store_true",
                       help="Loop over pressure, oil_sat, gas_sat and water_sat.")
    flags.add_argument("--window", type=int, default=None, help="Window length L.")
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stpf",
        description="Spatio-temporal property forecasting with convolutional LSTMs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()
    props = _property_flags()

    # synth
    p_synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset.")
    p_synth.add_argument("--preset", choices=["desk", "field"], default=None,
                         help="Grid and well layout preset (default: desk).")
    p_synth.set_defaults(func=cmd_synth)

    # train
    p_train = sub.add_parser("train", parents=[common, props], help="Train per-property models.")
    p_train.add_argument("--epochs", type=int, default=None, help="Training epochs.")
    p_train.add_argument("--cell-kind", choices=["convlstm", "stlstm"], default=None,
                         help="Recurrent cell (default: convlstm).")
    p_train.set_defaults(func=cmd_train)

    # predict
    p_pred = sub.add_parser("predict", parents=[common, props],
                            help="Predict training frames or roll out a forecast.")
    p_pred.add_argument("--mode", choices=PREDICT_MODES, default="rollout",
                        help="train-frames or rollout (default).")
    p_pred.add_argument("--horizon", type=int, default=None,
                        help="Rollout length (default: all frames after the training period).")
    p_pred.set_defaults(func=cmd_predict)

    # evaluate
    p_eval = sub.add_parser("evaluate", parents=[common, props],
                            help="Compare a prediction with the ground truth.")
    p_eval.add_argument("--mode", choices=PREDICT_MODES, default="rollout",
                        help="Which prediction to evaluate (default: rollout).")
    p_eval.set_defaults(func=cmd_evaluate)

    # params
    p_params = sub.add_parser("params", parents=[common], help="Print the parameter table.")
    p_params.add_argument("--cell-kind", choices=["convlstm", "stlstm"], default=None,
                          help="Recurrent cell (default: convlstm).")
    p_params.set_defaults(func=cmd_params)

    # import-csv
    p_csv = sub.add_parser("import-csv", parents=[common],
                           help="Convert a t,row,col,value CSV into an FRMS file.")
    p_csv.add_argument("csv", type=Path, help="CSV file to import.")
    p_csv.add_argument("--property", choices=[p.value for p in Property], default=None,
                       help="Property the values describe (default: pressure).")
    p_csv.add_argument("--output", type=Path, default=None,
                       help="FRMS file to write (default: <data>/<property>.frms).")
    p_csv.set_defaults(func=cmd_import_csv)

    # export-csv
    p_export = sub.add_parser("export-csv", parents=[common],
                              help="Convert an FRMS file into t,row,col,value CSV.")
    p_export.add_argument("frames", type=Path, nargs="?", default=None,
                          help="FRMS file to export (default: <data>/<property>.frms).")
    p_export.add_argument("--property", choices=[p.value for p in Property], default=None,
                          help="Property whose frame stack to export (default: pressure).")
    p_export.add_argument("--output", type=Path, default=None,
                          help="CSV file to write (default: next to the FRMS file).")
    p_export.set_defaults(func=cmd_export_csv)

    return parser


def _configure_logging(verbosity: int, default_level: str) -> None:
    levels = {0: default_level, 1: "INFO"}
    level = levels.get(verbosity, "DEBUG")
    logging.basicConfig(
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("stpf").setLevel(level)


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.settings = get_settings()
        _configure_logging(args.verbose, args.settings.log_level)
        args.func(args)
    except (InputError, OSError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)
    except NumericError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_NUMERIC)
    except StpfError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


if __name__ == "__main__":
    main()
