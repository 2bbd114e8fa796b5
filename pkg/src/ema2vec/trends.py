"""Linear / convex / concave classification of delay-versus-lag curves.

Each sample's unscaled delays are fitted as ``alpha * g(h) + beta`` with
``g`` the identity, the square or the square root of the lag index ``h``;
the class with the smallest residual sum of squares wins.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError
from .features import LongitudinalSample
from .numerics import solve_least_squares

TREND_CLASSES = ("linear", "convex", "concave")
_REGRESSORS = {
    "linear": lambda h: h,
    "convex": lambda h: h * h,
    "concave": np.sqrt,
}


@dataclass
class TrendFit:
    trend: str
    fits: dict[str, tuple[float, float, float]]  # class -> (alpha, beta, residual_ss)

    @property
    def residual(self) -> float:
        return self.fits[self.trend][2]

    def curve(self, lags: np.ndarray, trend: str | None = None) -> np.ndarray:
        trend = self.trend if trend is None else trend
        alpha, beta, _ = self.fits[trend]
        return alpha * _REGRESSORS[trend](np.asarray(lags, dtype=np.float64)) + beta


def classify_trend(delays: Sequence[float], lags: Sequence[float] | None = None, include_zero: bool = True) -> TrendFit:
    """Best of the three fits for delays observed at ``lags`` (default 0..n-1).

    NaN delays are dropped together with their lag.  Ties resolve in the
    order linear, convex, concave.
    """
    y = np.asarray(delays, dtype=np.float64)
    h = np.arange(y.shape[0], dtype=np.float64) if lags is None else np.asarray(lags, dtype=np.float64)
    keep = np.isfinite(y)
    if not include_zero:
        keep &= h != 0
    y, h = y[keep], h[keep]
    if y.shape[0] < 3:
        raise InsufficientDataError(f"trend fit needs >= 3 valid steps, got {y.shape[0]}")
    ones = np.ones_like(h)
    fits = {}
    for name in TREND_CLASSES:
        basis = np.column_stack([_REGRESSORS[name](h), ones])
        fits[name] = solve_least_squares(basis, y)
    best = min(TREND_CLASSES, key=lambda name: (fits[name][2], TREND_CLASSES.index(name)))
    return TrendFit(best, fits)


def classify_sample(sample: LongitudinalSample, include_zero: bool = True) -> TrendFit:
    valid = sample.step_mask
    lags = np.flatnonzero(valid)
    return classify_trend(sample.delays_days[valid], lags, include_zero=include_zero)


@dataclass
class TrendDistribution:
    counts: dict[str, int]
    mean_curves: dict[str, np.ndarray]  # class -> fitted value per h
    quartiles: dict[str, np.ndarray]  # class -> (H+1, 5): q1, median, q3, min, max
    skipped: int


def trend_distribution(samples: Sequence[LongitudinalSample], include_zero: bool = True) -> TrendDistribution:
    """Class counts, mean fitted curve and delay box-plot statistics per class.

    Samples with fewer than three valid steps are skipped and counted.
    """
    if not samples:
        raise InsufficientDataError("trend distribution of an empty dataset")
    H = samples[0].H
    lags = np.arange(H + 1, dtype=np.float64)
    curves: dict[str, list[np.ndarray]] = {c: [] for c in TREND_CLASSES}
    delays: dict[str, list[np.ndarray]] = {c: [] for c in TREND_CLASSES}
    skipped = 0
    for s in samples:
        try:
            fit = classify_sample(s, include_zero=include_zero)
        except InsufficientDataError:
            skipped += 1
            continue
        curves[fit.trend].append(fit.curve(lags))
        delays[fit.trend].append(np.where(s.step_mask, s.delays_days, np.nan))
    counts = {c: len(curves[c]) for c in TREND_CLASSES}
    mean_curves, quartiles = {}, {}
    for c in TREND_CLASSES:
        if not curves[c]:
            continue
        mean_curves[c] = np.mean(curves[c], axis=0)
        d = np.array(delays[c])
        stats = np.full((H + 1, 5), np.nan)
        for h in range(H + 1):
            col = d[:, h][np.isfinite(d[:, h])]
            if col.size:
                q1, med, q3 = np.percentile(col, [25.0, 50.0, 75.0])
                stats[h] = [q1, med, q3, col.min(), col.max()]
        quartiles[c] = stats
    return TrendDistribution(counts, mean_curves, quartiles, skipped)


def write_trend_csv(path: str | Path, dist: TrendDistribution) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "count", "h", "mean_fit", "q1", "median", "q3", "min", "max"])
        for c, curve in dist.mean_curves.items():
            for h, val in enumerate(curve):
                w.writerow([c, dist.counts[c], h, repr(float(val))] + [repr(float(v)) for v in dist.quartiles[c][h]])
