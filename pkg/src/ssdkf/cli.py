"""Command-line entry point: ``ssdkf {simulate|train|evaluate|infer|diagnose}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import SPLITS, ConfigError, load_config, with_overrides
from .gaussian import EmissionModel, NumericalError
from .neural import load_checkpoint, load_checkpoint_meta, save_checkpoint
from .simulators import DatasetFormatError, load_dataset, save_dataset

log = logging.getLogger("ssdkf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".17g")


def _write_rows(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _load(path) -> "harness.Trajectory":
    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc


def _config(args):
    cfg = load_config(args.config, getattr(args, "preset", None))
    return with_overrides(cfg, seed=args.seed, scale=args.scale, burn_in=getattr(args, "burn_in", None))


def _checkpoint(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    try:
        model = load_checkpoint(path)
        meta = load_checkpoint_meta(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc
    em = EmissionModel(np.array(meta["H"]), np.array(meta["R"]))
    return model, em, meta


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    data = harness.make_datasets(cfg.preset, cfg.scale, cfg.seed)
    for name in SPLITS:
        save_dataset(data[name], out / f"{name}.csv")
        log.info("wrote %s (%d rows)", out / f"{name}.csv", len(data[name]))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data or "data")
    train_t = _load(data_dir / "train.csv")
    val_path = data_dir / "val.csv"
    val_t = _load(val_path) if val_path.exists() else None
    em = harness.emission_for(cfg.preset)
    if train_t.y.shape[1] != em.obs_dim:
        raise DataError(f"training data has {train_t.y.shape[1]} measurement columns, preset {cfg.preset} expects {em.obs_dim}")
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if args.resume:
        model, _, _ = _checkpoint(args.resume)
    result = harness.fit_model(cfg, train_t, val_t, model)
    meta = {
        "preset": cfg.preset,
        "H": em.H.tolist(),
        "R": em.R.tolist(),
        "mode": cfg.eval_mode,
        "smoother_mean_ref": cfg.smoother_mean_ref,
        "best_val": result.best_val if math.isfinite(result.best_val) else None,
    }
    save_checkpoint(result.model, out / "checkpoint.json", meta)
    _write_rows(out / "losses.csv", ["iteration", "train_loss", "val_loss"], result.curve)
    log.info("best validation loss %s", _fmt(result.best_val))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    t = _load(args.data)
    if t.x is None:
        raise DataError(f"{args.data} has no ground-truth columns x1..xN")
    burn_in = args.burn_in or 0
    if args.baseline:
        preset = args.preset or "linear"
        em = harness.emission_for(preset)
        train_t = _load(args.train_data) if args.train_data else None
        try:
            est = harness.baseline_estimates(args.baseline, preset, t, train_t)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    else:
        model, em, meta = _checkpoint(args.checkpoint)
        if t.y.shape[1] != model.obs_dim or t.x.shape[1] != model.state_dim:
            raise DataError("dataset dimensions do not match the checkpoint")
        mode = args.mode or meta.get("mode", "filter")
        try:
            est = harness.estimate(model, em, t.y, mode, meta.get("smoother_mean_ref", "prior"))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    try:
        result = harness.metrics(est, t, em, burn_in)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out or "metrics.csv")
    _write_rows(out, ["metric", "value"], result.items())
    for k, v in result.items():
        print(f"{k},{_fmt(v)}")
    return EXIT_OK


def cmd_infer(args) -> int:
    t = _load(args.data)
    model, em, meta = _checkpoint(args.checkpoint)
    if t.y.shape[1] != model.obs_dim:
        raise DataError(f"dataset has {t.y.shape[1]} measurement columns, checkpoint expects {model.obs_dim}")
    mode = args.mode or meta.get("mode", "filter")
    try:
        est = harness.estimate(model, em, t.y, mode, meta.get("smoother_mean_ref", "prior"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n = model.state_dim
    header = [f"xhat{i + 1}" for i in range(n)] + [f"pdiag{i + 1}" for i in range(n)]
    diag = np.diagonal(est.cov, axis1=-2, axis2=-1)
    _write_rows(Path(args.out or "estimates.csv"), header, np.concatenate([est.mean, diag], axis=1))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    t = _load(args.data)
    model, em, meta = _checkpoint(args.checkpoint)
    if meta.get("preset") != "linear":
        raise DataError("the bias-variance diagnostic needs the linear preset (the optimal predictor is unknown otherwise)")
    if t.y.shape[1] != model.obs_dim:
        raise DataError("dataset dimensions do not match the checkpoint")
    try:
        report = harness.diagnose(model, em, t)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = list(vars(report).items())
    for k, v in rows:
        print(f"{k},{_fmt(v)}")
    if args.out:
        _write_rows(Path(args.out), ["term", "value"], rows)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssdkf", description="Self-supervised learned Kalman filtering and smoothing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--scale", type=float, help="multiply all sequence lengths")
        p.add_argument("--seed", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in", help="steps excluded from metrics")
        p.add_argument("--out", help="output file or directory")
        return p

    p = common(sub.add_parser("simulate", help="write train/val/test CSVs"))
    p.add_argument("--preset", choices=["linear", "lorenz"])

    p = common(sub.add_parser("train", help="fit a model, write checkpoint.json and losses.csv"))
    p.add_argument("--preset", choices=["linear", "lorenz"])
    p.add_argument("--data", help="directory holding train.csv (and val.csv)")
    p.add_argument("--resume", help="start from this checkpoint")

    p = common(sub.add_parser("evaluate", help="metrics of a checkpoint or baseline on a dataset with truth"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--mode", choices=["filter", "linearized_smooth", "parameterized_smooth"])
    p.add_argument("--baseline", choices=["raw", "optimal_kf", "supervised_kf", "eks"])
    p.add_argument("--preset", choices=["linear", "lorenz"], help="preset of a baseline")
    p.add_argument("--train-data", dest="train_data", help="training CSV with truth for fitted baselines")

    p = common(sub.add_parser("infer", help="per-step estimates as CSV"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--mode", choices=["filter", "linearized_smooth", "parameterized_smooth"])

    p = common(sub.add_parser("diagnose", help="bias-variance decomposition (linear preset)"))
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ssdkf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ssdkf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError) as exc:
        print(f"ssdkf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"ssdkf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
