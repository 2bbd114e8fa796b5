"""Mini-batch Adam training with validation-based epoch selection, and grid search."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolationError, DivergedTrainingError, Ema2VecError, NumericFaultError
from .features import LongitudinalSample
from .metrics import f1_scores
from .model import (
    DEFAULT_DROPOUT,
    ModelParams,
    ModelShape,
    Normalizer,
    backward_batch,
    forward_batch,
    init_params,
    loss_from_probs,
    make_batch,
    predict_proba,
    resolve_variant,
)
from .numerics import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "ema2vec"
    H: int = 4
    delta_max_days: float = 7.0
    batch_size: int = 4
    lr_main: float = 2e-5
    lr_embedding: float = 5e-4
    weight_decay: float = 5e-5
    dropout: tuple[float, ...] = DEFAULT_DROPOUT
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    embedding_dim: int | None = None
    hidden: int = 128
    mlp: tuple[int, ...] = (64, 32)
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", resolve_variant(self.variant))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        object.__setattr__(self, "mlp", tuple(int(w) for w in self.mlp))
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.lr_main < 0 or self.lr_embedding < 0 or self.weight_decay < 0:
            raise ContractViolationError("learning rates and weight decay must be non-negative")
        if any(not 0.0 <= p < 1.0 for p in self.dropout) or len(self.dropout) != len(self.mlp) + 1:
            raise ContractViolationError("dropout needs one rate in [0, 1) per LSTM output and hidden dense layer")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.H < 0:
            raise ContractViolationError("batch_size/patience must be >= 1, max_epochs and H >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("dropout", "mlp", "class_weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("dropout", "mlp", "class_weights"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_f1: float
    val_weighted_f1: float
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_weighted_f1(self) -> float:
        return self.epochs[self.best_epoch].val_weighted_f1 if self.best_epoch >= 0 else float("nan")

    def deterministic_rows(self) -> list[tuple]:
        return [(e.epoch, e.train_loss, e.val_macro_f1, e.val_weighted_f1) for e in self.epochs]


def write_history_csv(path: str | Path, history: TrainHistory, include_timing: bool = False) -> None:
    """History as CSV; wall time is left out unless asked for so that reruns compare byte-equal."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["epoch", "train_loss", "val_macro_f1", "val_weighted_f1", "best"]
        w.writerow(cols + (["wall_time_s"] if include_timing else []))
        for e in history.epochs:
            row = [e.epoch, repr(e.train_loss), repr(e.val_macro_f1), repr(e.val_weighted_f1), int(e.epoch == history.best_epoch)]
            w.writerow(row + ([f"{e.wall_time:.3f}"] if include_timing else []))


@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory
    normalizer: Normalizer
    config: TrainConfig

    def __iter__(self):
        # allows ``params, history = train(...)``
        return iter((self.params, self.history))


def model_shape_for(config: TrainConfig, samples: Sequence[LongitudinalSample]) -> ModelShape:
    s = samples[0]
    n_features = s.target_day.n_channels if config.variant == "lstm_day" else s.daily.shape[1]
    return ModelShape.for_variant(
        config.variant, n_features, s.covariates.shape[0], config.embedding_dim, hidden=config.hidden, mlp=config.mlp
    )


def _batch_seed(seed: int, epoch: int, batch: int) -> list[int]:
    return [seed, epoch, batch]


def train(
    train_set: Sequence[LongitudinalSample],
    validation_set: Sequence[LongitudinalSample],
    config: TrainConfig,
    init: ModelParams | None = None,
) -> TrainResult:
    """Train ``config.variant`` and return the snapshot with the best validation weighted F1.

    The embedding parameters use ``lr_embedding``; everything else uses
    ``lr_main``.  Ties in validation score keep the earliest epoch.
    Training stops after ``patience`` epochs without improvement.
    """
    if not train_set:
        raise ContractViolationError("empty training set")
    norm = Normalizer.fit(train_set, config.variant)
    tb = make_batch(train_set, config.variant, norm)
    vb = make_batch(validation_set, config.variant, norm) if validation_set else None
    shape = model_shape_for(config, train_set)
    params = init if init is not None else init_params(shape, np.random.default_rng([config.seed, 7919]))
    if params.shape != shape:
        raise ContractViolationError("initial parameters do not match the data/config shape")
    flat = params.flatten()
    emb_sel = params.embedding_mask()
    main_sel = ~emb_sel
    st_main = AdamState.zeros(int(main_sel.sum()))
    st_emb = AdamState.zeros(int(emb_sel.sum()))
    history = TrainHistory()
    best_flat = flat.copy()
    best_score = -np.inf
    n = len(tb)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(n)
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch = tb.subset(idx)
            p = ModelParams.unflatten(shape, flat)
            probs, trace = forward_batch(p, batch, "train", _batch_seed(config.seed, epoch, bi), config.dropout)
            loss = loss_from_probs(probs, batch.labels, config.class_weights)
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch, bi, loss)
            grad = backward_batch(trace, batch.labels, p, config.class_weights)
            try:
                flat[main_sel], st_main = adam_step(flat[main_sel], grad[main_sel], st_main, config.lr_main, config.weight_decay)
                if emb_sel.any():
                    flat[emb_sel], st_emb = adam_step(flat[emb_sel], grad[emb_sel], st_emb, config.lr_embedding, config.weight_decay)
            except NumericFaultError:
                raise DivergedTrainingError(epoch, bi, loss) from None
            if not np.all(np.isfinite(flat)):
                raise DivergedTrainingError(epoch, bi, loss)
            total += loss * len(idx)
            count += len(idx)
        current = ModelParams.unflatten(shape, flat)
        if vb is not None:
            pred = np.argmax(predict_proba(current, vb), axis=1)
            f1 = f1_scores(pred, vb.labels)
            vm, vw = f1.macro, f1.weighted
        else:
            vm = vw = float("nan")
        history.epochs.append(EpochRecord(epoch, total / max(count, 1), vm, vw, time.perf_counter() - t0))
        score = vw if vb is not None else epoch
        if score > best_score:
            best_score = score
            best_flat = flat.copy()
            history.best_epoch = epoch
        log.debug("epoch %d loss %.4f val wF1 %.4f", epoch, total / max(count, 1), vw)
        if epoch - history.best_epoch >= config.patience:
            break
    return TrainResult(ModelParams.unflatten(shape, best_flat), history, norm, config)


# ---------------------------------------------------------------------------
# Grid search


@dataclass
class GridEntry:
    config: TrainConfig
    fold_scores: list[float]
    status: str = "ok"

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.fold_scores)) if self.status == "ok" and self.fold_scores else float("nan")


@dataclass
class GridResult:
    best: TrainConfig | None
    entries: list[GridEntry]


def grid_search(
    grid: Sequence[TrainConfig],
    samples: Sequence[LongitudinalSample],
    folds,
    test_folds: Sequence[int] | None = None,
    strict_causal: bool = False,
) -> GridResult:
    """Score each config by mean best-epoch validation weighted F1 across folds.

    Only training and validation indices are used; test indices are never
    touched.  A config whose training fails is recorded as failed.
    """
    from .evaluation import relabel_for_fold

    if not grid:
        raise ContractViolationError("empty hyperparameter grid")
    test_folds = list(range(folds.k)) if test_folds is None else list(test_folds)
    entries = []
    for cfg in grid:
        scores = []
        status = "ok"
        for tf in test_folds:
            tr_idx, va_idx, _ = folds.assignment(tf, strict_causal=strict_causal)
            tr, va = relabel_for_fold(samples, tr_idx, va_idx)
            try:
                result = train(tr, va, cfg)
            except Ema2VecError as exc:
                status = f"failed: {exc}"
                log.warning("config %s failed on fold %d: %s", cfg.hash(), tf, exc)
                break
            scores.append(result.history.best_val_weighted_f1 if result.history.epochs else 0.0)
        entries.append(GridEntry(cfg, scores, status))
    ok = [e for e in entries if e.status == "ok" and np.isfinite(e.mean_score)]
    best = max(ok, key=lambda e: e.mean_score).config if ok else None
    return GridResult(best, entries)


def write_grid_csv(path: str | Path, result: GridResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_hash", "config", "status", "mean_val_weighted_f1", "fold_scores"])
        for e in result.entries:
            w.writerow([e.config.hash(), json.dumps(e.config.to_dict(), sort_keys=True), e.status,
                        repr(e.mean_score), ";".join(repr(s) for s in e.fold_scores)])
