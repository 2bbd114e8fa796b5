"""Command-line entry point: ``ema2vec <command> [flags]``.

Every value can come from three places, in increasing priority: built-in
defaults, a JSON ``--config`` file (flat key/value object, keys named like
the long flags with underscores), and explicit flags.

Errors are reported as one JSON line on stderr, with exit codes
2 usage/config, 3 missing file, 4 checkpoint mismatch, 5 schema error,
6 diverged training, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data.io import DATA_DIR_ENV, SAMPLES_FILE, default_data_dir, load_dataset, load_samples, save_dataset, save_samples
from .data.synthetic import SyntheticConfig, generate_synthetic
from .embeddings import class_average_profiles, write_profiles_csv
from .errors import (
    CheckpointMismatchError,
    ContractViolationError,
    DivergedTrainingError,
    Ema2VecError,
    InsufficientDataError,
    SchemaError,
)
from .evaluation import MODEL_NAMES, cross_validate, format_table, forecast_evaluate, relabel_for_fold, write_report_csv
from .features import SECONDS_PER_DAY, build_dataset, delta_histogram, write_histogram_csv
from .folds import chronological_folds
from .model import CLI_VARIANTS
from .train import TrainConfig, train, write_history_csv
from .trends import classify_sample, trend_distribution, write_trend_csv

log = logging.getLogger("ema2vec")

EXIT_USAGE, EXIT_MISSING, EXIT_CHECKPOINT, EXIT_SCHEMA, EXIT_DIVERGED, EXIT_OTHER = 2, 3, 4, 5, 6, 1

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "variant": "ema2vec",
    "H": 4,
    "delta_max_days": 7.0,
    "folds": 5,
    "jobs": 1,
    "students": 20,
    "days": 60,
    "reports_per_day": 1.5,
    "epochs": 100,
    "patience": 20,
    "batch_size": 4,
    "lr_main": 2e-5,
    "lr_embedding": 5e-4,
    "weight_decay": 5e-5,
    "hidden": 128,
    "test_fold": None,
    "bin_width_days": 1.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, *, model: bool = False, folds: bool = False) -> None:
    p.add_argument("--data-dir", type=Path, default=None,
                   help=f"dataset directory (default: ${DATA_DIR_ENV} or ./data)")
    p.add_argument("--config", type=Path, default=None, help="JSON file of flag values; explicit flags win")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--H", type=int, default=None, help="number of past reports per sample (default 4)")
    p.add_argument("--delta-max-days", type=float, default=None,
                   help="delays above this many days are treated as missing (default 7)")
    p.add_argument("--samples", type=Path, default=None,
                   help="read samples from this JSON-lines store instead of rebuilding from the dataset")
    if model:
        p.add_argument("--variant", choices=sorted(CLI_VARIANTS), default=None,
                       help="model: lstm (day sequence), long, timeconcat, time2vec or ema2vec (default ema2vec)")
    if folds:
        p.add_argument("--folds", type=int, default=None, help="number of chronological folds (default 5)")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None, help="maximum training epochs (default 100)")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience in epochs (default 20)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default 4)")
    p.add_argument("--lr-main", type=float, default=None, help="Adam learning rate for LSTM and MLP (default 2e-5)")
    p.add_argument("--lr-embedding", type=float, default=None,
                   help="Adam learning rate for the time embedding (default 5e-4)")
    p.add_argument("--weight-decay", type=float, default=None, help="L2 weight decay (default 5e-5)")
    p.add_argument("--hidden", type=int, default=None, help="LSTM hidden size (default 128)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ema2vec", description="Time-aware longitudinal stress prediction from EMA reports.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a deterministic synthetic dataset")
    _common(p)
    p.add_argument("--students", type=int, default=None, help="number of students (default 20)")
    p.add_argument("--days", type=int, default=None, help="study length in days (default 60)")
    p.add_argument("--reports-per-day", type=float, default=None, help="mean report rate (default 1.5)")

    p = sub.add_parser("features", help="build the longitudinal sample store")
    _common(p)
    p.add_argument("--out", type=Path, default=None, help=f"output path (default <data-dir>/{SAMPLES_FILE})")

    p = sub.add_parser("trends", help="trend-class counts, fitted curves and delay quartiles as CSV")
    _common(p)
    p.add_argument("--out", type=Path, default=None, help="output CSV (default <data-dir>/trends.csv)")

    p = sub.add_parser("train", help="train one model on one fold and save a checkpoint")
    _common(p, model=True, folds=True)
    _training(p)
    p.add_argument("--test-fold", type=int, default=None, help="held-out fold, never used (default: the last)")
    p.add_argument("--out", type=Path, default=None,
                   help="checkpoint path (default <data-dir>/checkpoint_<variant>.json)")
    p.add_argument("--history", type=Path, default=None,
                   help="history CSV path (default next to the checkpoint)")

    p = sub.add_parser("evaluate", help="chronological cross validation, per-fold and aggregate F1 as CSV")
    _common(p, model=True, folds=True)
    _training(p)
    p.add_argument("--jobs", type=int, default=None, help="folds trained in parallel (default 1)")
    p.add_argument("--strict-causal", action="store_true", help="train only on folds before the test fold")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default <data-dir>/evaluate_<variant>.csv)")

    p = sub.add_parser("forecast", help="score a frozen checkpoint with the target day removed")
    _common(p, folds=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by 'train'")
    p.add_argument("--test-fold", type=int, default=None, help="fold to score (default: the last)")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default <data-dir>/forecast_<variant>.csv)")

    p = sub.add_parser("similarity", help="class-average cosine similarity profiles of a trained embedding")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="time2vec or ema2vec checkpoint")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default <data-dir>/similarity.csv)")

    p = sub.add_parser("stats", help="histogram of report delays as CSV")
    _common(p)
    p.add_argument("--bin-width-days", type=float, default=None, help="histogram bin width in days (default 1)")
    p.add_argument("--out", type=Path, default=None, help="output CSV (default <data-dir>/delta_histogram.csv)")
    return parser


# ---------------------------------------------------------------------------


class Options:
    """Flag values resolved against the config file and defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: dict = {}
        if getattr(args, "config", None) is not None:
            path = args.config
            if not path.exists():
                raise FileNotFoundError(str(path))
            try:
                self.config = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {path}: invalid JSON ({exc.msg})") from None
            if not isinstance(self.config, dict):
                raise UsageError(f"config {path}: expected a JSON object")
            known = set(DEFAULTS) | {"data_dir", "samples", "out", "strict_causal"}
            unknown = set(self.config) - known
            if unknown:
                raise UsageError(f"config {path}: unknown keys {sorted(unknown)}")

    def get(self, key: str):
        val = getattr(self.args, key, None)
        if val is not None and val is not False:
            return val
        if key in self.config:
            return self.config[key]
        return DEFAULTS.get(key, val)

    @property
    def data_dir(self) -> Path:
        d = self.get("data_dir")
        return Path(d) if d is not None else default_data_dir()

    def out(self, default_name: str) -> Path:
        o = self.get("out")
        return Path(o) if o is not None else self.data_dir / default_name

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                variant=CLI_VARIANTS.get(self.get("variant"), self.get("variant")),
                H=int(self.get("H")),
                delta_max_days=float(self.get("delta_max_days")),
                batch_size=int(self.get("batch_size")),
                lr_main=float(self.get("lr_main")),
                lr_embedding=float(self.get("lr_embedding")),
                weight_decay=float(self.get("weight_decay")),
                max_epochs=int(self.get("epochs")),
                patience=int(self.get("patience")),
                seed=int(self.get("seed")),
                hidden=int(self.get("hidden")),
            )
        except ContractViolationError as exc:
            raise UsageError(str(exc)) from None


def _samples(opt: Options):
    path = opt.get("samples")
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(str(path))
        return load_samples(path)
    records = load_dataset(opt.data_dir)
    return build_dataset(records, H=int(opt.get("H")), delta_max=float(opt.get("delta_max_days")) * SECONDS_PER_DAY)


def _fold_count(opt: Options) -> int:
    k = int(opt.get("folds"))
    if k < 2:
        raise UsageError("--folds must be at least 2")
    return k


def _test_fold(opt: Options, k: int) -> int:
    tf = opt.get("test_fold")
    tf = k - 1 if tf is None else int(tf)
    if not 0 <= tf < k:
        raise UsageError(f"--test-fold must be in 0..{k - 1}")
    return tf


def cmd_generate(opt: Options) -> dict:
    cfg = SyntheticConfig(
        n_students=int(opt.get("students")),
        study_days=int(opt.get("days")),
        reports_per_day=float(opt.get("reports_per_day")),
        seed=int(opt.get("seed")),
        H=int(opt.get("H")),
        delta_max_days=float(opt.get("delta_max_days")),
    )
    records = generate_synthetic(cfg)
    save_dataset(records, opt.data_dir)
    return {"records": len(records), "students": cfg.n_students, "data_dir": str(opt.data_dir)}


def cmd_features(opt: Options) -> dict:
    samples = _samples(opt)
    out = opt.out(SAMPLES_FILE)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_samples(samples, out)
    return {"samples": len(samples), "out": str(out)}


def cmd_trends(opt: Options) -> dict:
    dist = trend_distribution(_samples(opt))
    out = opt.out("trends.csv")
    write_trend_csv(out, dist)
    return {"counts": dist.counts, "skipped": dist.skipped, "out": str(out)}


def cmd_train(opt: Options) -> dict:
    cfg = opt.train_config()
    samples = _samples(opt)
    k = _fold_count(opt)
    tf = _test_fold(opt, k)
    folds = chronological_folds(samples, k)
    tr_idx, va_idx, _ = folds.assignment(tf)
    tr, va = relabel_for_fold(samples, tr_idx, va_idx)
    result = train(tr, va, cfg)
    out = opt.out(f"checkpoint_{cfg.variant}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    config = dict(cfg.to_dict(), folds=k, test_fold=tf)
    save_checkpoint(result.params, out, result.normalizer, config)
    hist = opt.get("history")
    hist = Path(hist) if hist is not None else out.with_name(f"history_{cfg.variant}.csv")
    write_history_csv(hist, result.history)
    return {"checkpoint": str(out), "history": str(hist), "best_epoch": result.history.best_epoch,
            "best_val_weighted_f1": result.history.best_val_weighted_f1}


def cmd_evaluate(opt: Options) -> dict:
    cfg = opt.train_config()
    samples = _samples(opt)
    cv = cross_validate(samples, cfg, k=_fold_count(opt), strict_causal=bool(opt.get("strict_causal")),
                        jobs=int(opt.get("jobs")))
    out = opt.out(f"evaluate_{cfg.variant}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, [cv.report])
    print(format_table([cv.report]))
    return {"out": str(out), "f1_macro": cv.report.macro_mean, "f1_weighted": cv.report.weighted_mean}


def _checkpoint(opt: Options) -> Checkpoint:
    path = opt.get("checkpoint")
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return load_checkpoint(path)


def cmd_forecast(opt: Options) -> dict:
    ckpt = _checkpoint(opt)
    if ckpt.params.variant == "lstm_day":
        raise CheckpointMismatchError("forecasting needs a longitudinal checkpoint, got lstm_day")
    samples = _samples(opt)
    k = int(ckpt.config.get("folds", opt.get("folds")))
    tf = opt.get("test_fold")
    tf = int(ckpt.config.get("test_fold", k - 1)) if tf is None else int(tf)
    folds = chronological_folds(samples, k)
    tr_idx, va_idx, te_idx = folds.assignment(tf)
    _, _, te = relabel_for_fold(samples, tr_idx, va_idx, te_idx)
    report = forecast_evaluate(ckpt, te, fold=tf, model=MODEL_NAMES[ckpt.params.variant] + " (forecast)")
    out = opt.out(f"forecast_{ckpt.params.variant}.csv")
    write_report_csv(out, [report])
    print(format_table([report]))
    f = report.folds[0]
    return {"out": str(out), "f1_macro": f.macro_f1, "f1_weighted": f.weighted_f1, "skipped": f.skipped}


def cmd_similarity(opt: Options) -> dict:
    ckpt = _checkpoint(opt)
    emb = ckpt.params.embedding
    if emb is None or emb.kind == "timeconcat":
        raise CheckpointMismatchError(f"similarity needs a time2vec or ema2vec checkpoint, got {ckpt.params.variant}")
    deltas, labels = [], []
    for s in _samples(opt):
        if not s.step_mask.all():
            continue
        try:
            labels.append(classify_sample(s).trend)
        except InsufficientDataError:
            continue
        deltas.append(s.deltas)
    if not deltas:
        raise InsufficientDataError("no sample has a fully observed delay window")
    profiles, warnings = class_average_profiles(deltas, labels, emb)
    out = opt.out("similarity.csv")
    write_profiles_csv(out, profiles)
    return {"out": str(out), "samples": len(deltas), "warnings": warnings}


def cmd_stats(opt: Options) -> dict:
    width = float(opt.get("bin_width_days"))
    if width <= 0:
        raise UsageError("--bin-width-days must be positive")
    edges, counts = delta_histogram(_samples(opt), width)
    out = opt.out("delta_histogram.csv")
    write_histogram_csv(out, edges, counts)
    return {"out": str(out), "delays": int(counts.sum())}


COMMANDS = {
    "generate": cmd_generate,
    "features": cmd_features,
    "trends": cmd_trends,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "similarity": cmd_similarity,
    "stats": cmd_stats,
}


def _fail(code: int, exc: BaseException, **extra) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, **extra}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](Options(args))
    except (UsageError, ContractViolationError) as exc:
        return _fail(EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc, path=exc.filename or str(exc))
    except CheckpointMismatchError as exc:
        return _fail(EXIT_CHECKPOINT, exc)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, exc, path=exc.path, row=exc.row)
    except DivergedTrainingError as exc:
        return _fail(EXIT_DIVERGED, exc, epoch=exc.epoch, batch=exc.batch)
    except Ema2VecError as exc:
        return _fail(EXIT_OTHER, exc)
    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
