"""Daily functionals and longitudinal sample assembly.

A report's day sequence (``T`` timesteps x ``F`` channels) is summarised by
eight statistics per channel.  The target report and its ``H`` predecessors
form a longitudinal sample together with their delays to the target, which
are masked above ``delta_max`` and scaled to [0, 1].

Storage is newest first: index ``h = 0`` is the target report.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.records import EmaRecord, covariate_vector, group_by_student, map_label, student_medians
from .errors import ContractViolationError, OrderingViolationError

SECONDS_PER_DAY = 86400
DEFAULT_DELTA_MAX = 7 * SECONDS_PER_DAY

FUNCTIONAL_NAMES = ("mean", "max", "min", "std", "median", "sum", "iqr", "mcr")
N_FUNCTIONALS = len(FUNCTIONAL_NAMES)


@dataclass
class DaySequence:
    """Sensing values over one day; ``mask`` is True where a value is missing."""

    values: np.ndarray
    mask: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ContractViolationError(f"day sequence must be T x F with T >= 1, got {self.values.shape}")
        if self.mask is None:
            self.mask = ~np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ContractViolationError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class DailyFunctional:
    values: np.ndarray
    warnings: list[str] = field(default_factory=list)


def daily_functionals(day: DaySequence) -> DailyFunctional:
    """Per-channel mean, max, min, std, median, sum, IQR and mean crossing rate.

    Statistics use unmasked cells only.  The result is laid out channel by
    channel, eight values each.  A channel with no unmasked cell yields NaN
    for all eight entries and a warning.
    """
    x = np.where(day.mask, np.nan, day.values)
    valid = ~day.mask
    count = valid.sum(axis=0)
    n_ch = x.shape[1]
    out = np.full((n_ch, N_FUNCTIONALS), np.nan)
    warnings = [f"channel {c} fully masked" for c in np.flatnonzero(count == 0)]
    ok = count > 0
    if np.any(ok):
        xo = x[:, ok]
        vo = valid[:, ok]
        mean = np.nanmean(xo, axis=0)
        centered = xo - mean
        q25, q50, q75 = _quantiles(xo, count[ok], (0.25, 0.5, 0.75))
        # Crossings only between adjacent timesteps that are both unmasked.
        sign = np.sign(np.where(vo, centered, 0.0))
        pair_ok = vo[1:] & vo[:-1]
        crossings = ((sign[1:] * sign[:-1]) < 0) & pair_ok
        n_pairs = pair_ok.sum(axis=0)
        mcr = np.where(n_pairs > 0, crossings.sum(axis=0) / np.maximum(n_pairs, 1), 0.0)
        out[ok] = np.column_stack([
            mean,
            np.nanmax(xo, axis=0),
            np.nanmin(xo, axis=0),
            np.sqrt(np.nanmean(centered * centered, axis=0)),
            q50,
            np.nansum(xo, axis=0),
            q75 - q25,
            mcr,
        ])
    return DailyFunctional(out.reshape(-1), warnings)


def _quantiles(x: np.ndarray, n: np.ndarray, probs) -> list[np.ndarray]:
    """Linear-interpolation quantiles per column, ignoring NaN (n = finite count)."""
    srt = np.sort(x, axis=0)  # NaN sorts last
    cols = np.arange(x.shape[1])
    out = []
    for p in probs:
        pos = p * (n - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        frac = pos - lo
        a = srt[lo, cols]
        b = srt[hi, cols]
        out.append(a + (b - a) * frac)
    return out


def functional_vector(day) -> np.ndarray:
    """Day-level feature vector for a record's ``day`` (raw sequence or precomputed)."""
    if isinstance(day, DaySequence):
        return daily_functionals(day).values
    if day is None:
        raise ContractViolationError("record has no day sequence")
    return np.asarray(day, dtype=np.float64)


def scale_delta(delta: float, delta_max: float = DEFAULT_DELTA_MAX) -> float:
    """Delay scaled by ``delta_max``; NaN (missing) beyond it."""
    if delta < 0:
        raise OrderingViolationError(f"negative delay {delta}")
    if delta > delta_max:
        return math.nan
    return delta / delta_max


@dataclass
class LongitudinalSample:
    """Target report plus its H predecessors, newest first.

    ``deltas`` are scaled (NaN when masked); ``delays_days`` keep the raw
    delay in days whenever a predecessor report exists.
    """

    daily: np.ndarray  # (H+1, n_features)
    deltas: np.ndarray  # (H+1,)
    delays_days: np.ndarray  # (H+1,)
    step_mask: np.ndarray  # (H+1,) bool, True = valid
    covariates: np.ndarray
    label: int
    raw_stress: int
    student_id: str
    target_time: int
    target_day: DaySequence | None = None

    @property
    def H(self) -> int:
        return self.deltas.shape[0] - 1

    @property
    def n_valid(self) -> int:
        return int(self.step_mask.sum())


def build_longitudinal_sample(
    records: Sequence[EmaRecord],
    target_index: int,
    H: int = 4,
    delta_max: float = DEFAULT_DELTA_MAX,
    student_median: float | None = None,
    functionals: Sequence[np.ndarray] | None = None,
) -> LongitudinalSample:
    """Assemble the sample whose target is ``records[target_index]``.

    ``records`` are one student's reports in ascending time order.  Only
    indices ``<= target_index`` are read.  Missing history and delays above
    ``delta_max`` are masked.  The label uses ``student_median`` when given,
    otherwise the median raw stress over all of ``records``.
    ``functionals`` optionally caches the day vector of every record.
    """
    if not 0 <= target_index < len(records):
        raise ContractViolationError(f"target index {target_index} out of range for {len(records)} records")
    target = records[target_index]
    t0 = target.timestamp
    day_vec = (lambda i: functionals[i]) if functionals is not None else (lambda i: functional_vector(records[i].day))
    first = day_vec(target_index)
    n_feat = first.shape[0]
    daily = np.full((H + 1, n_feat), np.nan)
    deltas = np.full(H + 1, np.nan)
    delays = np.full(H + 1, np.nan)
    step_mask = np.zeros(H + 1, dtype=bool)
    for h in range(H + 1):
        idx = target_index - h
        if idx < 0:
            break
        rec = records[idx]
        d = t0 - rec.timestamp
        if d < 0:
            raise OrderingViolationError(
                f"records of student {target.student_id} not sorted at index {idx}"
            )
        daily[h] = day_vec(idx)
        delays[h] = d / SECONDS_PER_DAY
        deltas[h] = scale_delta(d, delta_max)
        step_mask[h] = not math.isnan(deltas[h])
    if student_median is None:
        student_median = float(np.median([r.raw_stress for r in records]))
    return LongitudinalSample(
        daily=daily,
        deltas=deltas,
        delays_days=delays,
        step_mask=step_mask,
        covariates=covariate_vector(target),
        label=map_label(target.raw_stress, student_median),
        raw_stress=target.raw_stress,
        student_id=target.student_id,
        target_time=t0,
        target_day=target.day if isinstance(target.day, DaySequence) else None,
    )


def build_dataset(
    records: Sequence[EmaRecord],
    H: int = 4,
    delta_max: float = DEFAULT_DELTA_MAX,
) -> list[LongitudinalSample]:
    """One sample per report, students in first-seen order, each chronologically.

    Labels use each student's median over all of their reports; cross
    validation relabels with training-fold medians.
    """

    medians = student_medians(records)
    out = []
    for sid, recs in group_by_student(records).items():
        cache = [functional_vector(r.day) for r in recs]
        for i in range(len(recs)):
            out.append(build_longitudinal_sample(recs, i, H, delta_max, medians[sid], cache))
    return out


def delta_histogram(
    samples: Sequence[LongitudinalSample],
    bin_width_days: float = 1.0,
    max_days: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Counts of unscaled delays over valid steps ``h >= 1``.

    Returns ``(edges, counts)`` with ``len(edges) == len(counts) + 1``; bins
    are half-open ``[edge_i, edge_{i+1})``.
    """
    if not samples:
        raise ContractViolationError("delta histogram needs a nonempty dataset")
    if bin_width_days <= 0:
        raise ContractViolationError("bin width must be positive")
    vals = np.concatenate([s.delays_days[1:][s.step_mask[1:]] for s in samples])
    top = max_days if max_days is not None else (float(vals.max()) if vals.size else 0.0)
    n_bins = int(math.floor(top / bin_width_days)) + 1
    counts = np.zeros(n_bins, dtype=np.int64)
    if vals.size:
        idx = np.floor(vals / bin_width_days).astype(np.int64)
        idx = idx[idx < n_bins]
        np.add.at(counts, idx, 1)
    edges = np.arange(n_bins + 1) * bin_width_days
    return edges, counts


def write_histogram_csv(path: str | Path, edges: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_start_days", "bin_end_days", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
