"""Chronological cross validation, forecasting evaluation and report export."""

from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.checkpoint import Checkpoint
from .data.records import map_label
from .errors import ContractViolationError, Ema2VecError
from .features import LongitudinalSample
from .folds import FoldSplit, chronological_folds
from .metrics import F1Result, f1_scores
from .model import make_batch, predict_proba
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

MODEL_NAMES = {
    "lstm_day": "LSTM",
    "long_lstm": "LongLSTM",
    "timeconcat": "TimeConcat LongLSTM",
    "time2vec": "LongLSTM + Time2Vec",
    "ema2vec": "LongLSTM + Ema2Vec",
}


@dataclass
class FoldMetrics:
    fold: int
    macro_f1: float
    weighted_f1: float
    n_test: int
    confusion: np.ndarray | None = None
    status: str = "ok"
    skipped: int = 0


@dataclass
class MetricReport:
    model: str
    folds: list[FoldMetrics] = field(default_factory=list)

    def _ok(self) -> list[FoldMetrics]:
        return [f for f in self.folds if f.status == "ok"]

    @property
    def macro_mean(self) -> float:
        return float(np.mean([f.macro_f1 for f in self._ok()])) if self._ok() else float("nan")

    @property
    def macro_std(self) -> float:
        return float(np.std([f.macro_f1 for f in self._ok()])) if self._ok() else float("nan")

    @property
    def weighted_mean(self) -> float:
        return float(np.mean([f.weighted_f1 for f in self._ok()])) if self._ok() else float("nan")

    @property
    def weighted_std(self) -> float:
        return float(np.std([f.weighted_f1 for f in self._ok()])) if self._ok() else float("nan")


def fold_metrics(fold: int, result: F1Result, n_test: int, skipped: int = 0) -> FoldMetrics:
    return FoldMetrics(fold, result.macro, result.weighted, n_test, result.confusion, "ok", skipped)


def write_report_csv(path: str | Path, reports: Sequence[MetricReport]) -> None:
    """One row per fold plus one aggregate row (mean and population std) per model."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "status", "n_test", "skipped", "f1_macro", "f1_macro_std",
                    "f1_weighted", "f1_weighted_std", "confusion"])
        for rep in reports:
            for f in rep.folds:
                cm = "" if f.confusion is None else ";".join(str(int(v)) for v in np.asarray(f.confusion).reshape(-1))
                w.writerow([rep.model, f.fold, f.status, f.n_test, f.skipped, repr(f.macro_f1), "",
                            repr(f.weighted_f1), "", cm])
            w.writerow([rep.model, "aggregate", "ok" if rep._ok() else "failed", sum(f.n_test for f in rep._ok()),
                        sum(f.skipped for f in rep._ok()), repr(rep.macro_mean), repr(rep.macro_std),
                        repr(rep.weighted_mean), repr(rep.weighted_std), ""])


def format_table(reports: Sequence[MetricReport]) -> str:
    rows = [("Model", "F1 Macro", "F1 Weighted")]
    for r in reports:
        rows.append((r.model, f"{r.macro_mean:.3f} ± {r.macro_std:.3f}", f"{r.weighted_mean:.3f} ± {r.weighted_std:.3f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------


def relabel(samples: Sequence[LongitudinalSample], medians: dict[str, float]) -> list[LongitudinalSample]:
    out = []
    for s in samples:
        if s.student_id in medians:
            out.append(dataclasses.replace(s, label=map_label(s.raw_stress, medians[s.student_id])))
        else:
            out.append(s)
    return out


def training_medians(samples: Sequence[LongitudinalSample], visible: np.ndarray) -> dict[str, float]:
    vals: dict[str, list[int]] = {}
    for i in visible:
        vals.setdefault(samples[i].student_id, []).append(samples[i].raw_stress)
    return {sid: float(np.median(v)) for sid, v in vals.items()}


def relabel_for_fold(samples, train_idx, val_idx, test_idx=None):
    """Relabel with per-student medians of the training-visible (train + validation) reports."""
    medians = training_medians(samples, np.concatenate([train_idx, val_idx]))
    parts = [relabel([samples[i] for i in idx], medians) for idx in (train_idx, val_idx)]
    if test_idx is not None:
        parts.append(relabel([samples[i] for i in test_idx], medians))
    return tuple(parts)


def evaluate_params(result_or_ckpt, samples: Sequence[LongitudinalSample]) -> F1Result:
    params, norm = result_or_ckpt.params, result_or_ckpt.normalizer
    batch = make_batch(samples, params.variant, norm)
    pred = np.argmax(predict_proba(params, batch), axis=1)
    return f1_scores(pred, batch.labels)


def forecast_transform(sample: LongitudinalSample) -> LongitudinalSample:
    """Drop the target day: ``[d0, d1, ..., dH] -> [d1, d1, d2, ..., dH]``; delays and mask unchanged."""
    if sample.H < 1 or not sample.step_mask[1]:
        raise ContractViolationError("forecasting needs a valid h=1 step")
    daily = sample.daily.copy()
    daily[0] = sample.daily[1]
    return dataclasses.replace(sample, daily=daily, target_day=None)


def forecast_evaluate(checkpoint: Checkpoint | TrainResult, samples: Sequence[LongitudinalSample],
                      fold: int = 0, model: str | None = None) -> MetricReport:
    """Score the frozen model on forecast-transformed samples (no finetuning)."""
    params = checkpoint.params
    if params.variant == "lstm_day":
        raise ContractViolationError("forecasting applies to longitudinal models only")
    usable = [forecast_transform(s) for s in samples if s.H >= 1 and s.step_mask[1]]
    skipped = len(samples) - len(usable)
    rep = MetricReport(model or MODEL_NAMES[params.variant])
    if not usable:
        rep.folds.append(FoldMetrics(fold, float("nan"), float("nan"), 0, None, "failed: no usable samples", skipped))
        return rep
    rep.folds.append(fold_metrics(fold, evaluate_params(checkpoint, usable), len(usable), skipped))
    return rep


# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    report: MetricReport
    forecast: MetricReport | None
    results: list[TrainResult | None]
    folds: FoldSplit


def _run_fold(samples, folds: FoldSplit, fold: int, config: TrainConfig, strict_causal: bool, with_forecast: bool):
    tr_idx, va_idx, te_idx = folds.assignment(fold, strict_causal=strict_causal)
    if tr_idx.size == 0 or te_idx.size == 0:
        return fold, None, "failed: empty train or test set", None, None
    tr, va, te = relabel_for_fold(samples, tr_idx, va_idx, te_idx)
    cfg = config.replace(seed=config.seed * 1000 + fold)
    try:
        result = train(tr, va, cfg)
    except Ema2VecError as exc:
        return fold, None, f"failed: {exc}", None, None
    f1 = evaluate_params(result, te)
    fc = None
    if with_forecast and result.params.variant != "lstm_day":
        fc = forecast_evaluate(result, te, fold).folds[0]
    return fold, result, "ok", (f1, len(te)), fc


def cross_validate(
    samples: Sequence[LongitudinalSample],
    config: TrainConfig,
    k: int = 5,
    strict_causal: bool = False,
    forecast: bool = False,
    jobs: int = 1,
) -> CVResult:
    """Train per fold, test on the held-out chronological block, aggregate mean ± std.

    Fold ``i`` trains with seed ``config.seed * 1000 + i``.  A failing fold
    is recorded and the remaining folds continue.
    """
    if k < 2:
        raise ContractViolationError("cross validation needs k >= 2")
    folds = chronological_folds(samples, k)
    args = [(list(samples), folds, i, config, strict_causal, forecast) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_fold, *zip(*args)))
    else:
        outs = [_run_fold(*a) for a in args]
    name = MODEL_NAMES[config.variant]
    report = MetricReport(name)
    fc_report = MetricReport(name) if forecast and config.variant != "lstm_day" else None
    results = []
    for fold, result, status, scored, fc in outs:
        results.append(result)
        if status != "ok":
            log.warning("fold %d: %s", fold, status)
            report.folds.append(FoldMetrics(fold, float("nan"), float("nan"), 0, None, status))
            if fc_report is not None:
                fc_report.folds.append(FoldMetrics(fold, float("nan"), float("nan"), 0, None, status))
            continue
        f1, n_test = scored
        report.folds.append(fold_metrics(fold, f1, n_test))
        if fc_report is not None:
            fc_report.folds.append(fc)
    return CVResult(report, fc_report, results, folds)


def majority_report(samples: Sequence[LongitudinalSample], k: int = 5) -> MetricReport:
    """Predict each fold's training-majority class for every test sample."""
    folds = chronological_folds(samples, k)
    rep = MetricReport("Majority class")
    for i in range(k):
        tr_idx, va_idx, te_idx = folds.assignment(i)
        tr, _, te = relabel_for_fold(samples, tr_idx, va_idx, te_idx)
        if not tr or not te:
            rep.folds.append(FoldMetrics(i, float("nan"), float("nan"), 0, None, "failed: empty split"))
            continue
        majority = int(np.argmax(np.bincount([s.label for s in tr], minlength=3)))
        labels = [s.label for s in te]
        rep.folds.append(fold_metrics(i, f1_scores([majority] * len(te), labels), len(te)))
    return rep
