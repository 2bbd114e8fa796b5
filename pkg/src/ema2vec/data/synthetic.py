"""Deterministic synthetic EMA cohort.

Each student's reporting timeline is a chain of short segments.  A segment
follows one regime: ``linear`` (steady gaps), ``convex`` (gaps shrink
geometrically, i.e. reporting speeds up) or ``concave`` (gaps grow, reporting
slows down).  Within a segment, every window of consecutive reports has a
delay-versus-lag curve of the segment's shape.

Sensing channels follow a per-student daily latent state (AR(1) over
calendar days); the last channel is the time to the next weekly deadline.
Raw stress (1-5) comes from a latent score combining the trend class of the
report's delay window, the mean latent state over that window, and the
covariates, plus noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ContractViolationError, InsufficientDataError
from ..features import SECONDS_PER_DAY, DaySequence
from ..trends import classify_trend
from .records import EmaRecord

REGIMES = ("linear", "convex", "concave")
TREND_SCORE = {"linear": 0.0, "convex": -1.0, "concave": 1.0}
# 2013-03-25 00:00 UTC, a Monday
DEFAULT_START = 1364169600


@dataclass(frozen=True)
class SyntheticConfig:
    n_students: int = 20
    study_days: int = 60
    reports_per_day: float = 1.5
    regime_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    trend_weight: float = 1.5
    functional_weight: float = 1.0
    covariate_weight: float = 0.5
    noise: float = 0.5
    seed: int = 0
    n_channels: int = 10
    n_hours: int = 24
    missing_rate: float = 0.02
    absence_rate: float = 0.005
    gap_ratio: float = 1.6
    gap_jitter: float = 0.08
    H: int = 4
    delta_max_days: float = 7.0
    start_timestamp: int = DEFAULT_START

    def __post_init__(self):
        mix = np.asarray(self.regime_mix, dtype=np.float64)
        if mix.shape != (3,) or np.any(mix < 0) or not math.isclose(mix.sum(), 1.0, abs_tol=1e-9):
            raise ContractViolationError(f"regime_mix must be 3 non-negative proportions summing to 1, got {self.regime_mix}")
        if self.n_students < 1 or self.study_days < 1 or self.reports_per_day <= 0:
            raise ContractViolationError("n_students, study_days and reports_per_day must be positive")
        if self.n_channels < 2 or self.n_hours < 1:
            raise ContractViolationError("need at least 2 channels (one is the deadline channel) and 1 hour")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime_mix"] = list(self.regime_mix)
        return d


def _segment_gaps(rng: np.random.Generator, regime: str, n: int, mean_gap: float, cfg: SyntheticConfig) -> np.ndarray:
    j = np.arange(n, dtype=np.float64)
    if regime == "linear":
        base = np.ones(n)
    elif regime == "convex":
        base = cfg.gap_ratio ** (-j)
    else:
        base = cfg.gap_ratio**j
    gaps = mean_gap * base / base.mean()
    gaps *= 1.0 + cfg.gap_jitter * rng.standard_normal(n)
    return np.maximum(gaps, 0.02 * mean_gap)


def _report_times(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    """Report times in days since study start."""
    mean_gap = 1.0 / (cfg.reports_per_day * rng.uniform(0.8, 1.25))
    t = rng.uniform(0.3, 1.0)
    times = [t]
    mix = np.asarray(cfg.regime_mix, dtype=np.float64)
    while t < cfg.study_days:
        regime = REGIMES[rng.choice(3, p=mix)]
        for gap in _segment_gaps(rng, regime, int(rng.integers(5, 8)), mean_gap, cfg):
            if rng.random() < cfg.absence_rate:
                gap += rng.uniform(2.0, 10.0)
            t += gap
            if t >= cfg.study_days:
                break
            times.append(t)
    return np.array(times)


def _window_trend(times_s: np.ndarray, j: int, cfg: SyntheticConfig) -> str:
    lo = max(0, j - cfg.H)
    delays = (times_s[j] - times_s[lo : j + 1][::-1]) / SECONDS_PER_DAY
    delays = delays[delays <= cfg.delta_max_days]
    try:
        return classify_trend(delays).trend
    except InsufficientDataError:
        return "linear"


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> list[EmaRecord]:
    """Records for every student, sorted by student then time; fully determined by ``config.seed``."""
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    shared_ss, *student_ss = root.spawn(cfg.n_students + 1)
    shared = np.random.default_rng(shared_ss)
    n_sense = cfg.n_channels - 1
    base = shared.normal(0.0, 1.0, n_sense)
    amp = shared.uniform(0.2, 1.0, n_sense)
    phase = shared.uniform(0.0, 2 * np.pi, n_sense)
    load = shared.uniform(0.5, 1.5, n_sense) * shared.choice([-1.0, 1.0], n_sense)
    exam_windows = [(0.40 * cfg.study_days, 0.52 * cfg.study_days), (0.87 * cfg.study_days, cfg.study_days + 1)]
    width = len(str(cfg.n_students - 1))

    records: list[EmaRecord] = []
    for s in range(cfg.n_students):
        rng = np.random.default_rng(student_ss[s])
        sid = f"s{s:0{width}d}"
        n_days = cfg.study_days + 2
        u = np.zeros(n_days)
        u[0] = rng.standard_normal()
        for d in range(1, n_days):
            u[d] = 0.7 * u[d - 1] + math.sqrt(1 - 0.49) * rng.standard_normal()
        deadline_offset = rng.uniform(3.0, 5.0)
        offset = 0.5 * rng.standard_normal()

        times = _report_times(rng, cfg)
        times_s = cfg.start_timestamp + np.round(times * SECONDS_PER_DAY).astype(np.int64)
        for k in range(1, times_s.size):
            times_s[k] = max(times_s[k], times_s[k - 1] + 60)
        times = (times_s - cfg.start_timestamp) / SECONDS_PER_DAY

        state = np.empty(times.size)
        for j, t in enumerate(times):
            state[j] = u[min(int(t), n_days - 1)] + 0.3 * rng.standard_normal()

        for j, t in enumerate(times):
            hours = t - 1.0 + (np.arange(cfg.n_hours) + 1) / cfg.n_hours
            hod = (hours * 24.0) % 24.0
            vals = np.empty((cfg.n_hours, cfg.n_channels))
            vals[:, :n_sense] = (
                base
                + amp * np.sin(2 * np.pi * hod[:, None] / 24.0 + phase)
                + load * state[j]
                + 0.5 * rng.standard_normal((cfg.n_hours, n_sense))
            )
            next_deadline = deadline_offset + 7.0 * np.ceil((hours - deadline_offset) / 7.0)
            vals[:, -1] = (next_deadline - hours) / 7.0
            mask = rng.random(vals.shape) < cfg.missing_rate
            if rng.random() < 0.01:
                mask[:, rng.integers(n_sense)] = True
            vals = np.where(mask, 0.0, vals)

            day_idx = min(int(t), n_days - 1)
            sleep_duration = float(np.clip(7.0 - 0.5 * u[day_idx] + rng.normal(0.0, 1.0), 3.0, 11.0))
            sleep_rating = float(np.clip(np.round(2.5 - 0.4 * u[day_idx] + rng.normal(0.0, 0.7)), 1.0, 4.0))
            exam = any(lo <= t < hi for lo, hi in exam_windows)

            lo = max(0, j - cfg.H)
            window = [i for i in range(lo, j + 1) if times[j] - times[i] <= cfg.delta_max_days]
            trend = _window_trend(times_s, j, cfg)
            score = (
                cfg.trend_weight * TREND_SCORE[trend]
                + cfg.functional_weight * float(np.mean(state[window]))
                + cfg.covariate_weight * ((1.0 if exam else 0.0) + (7.0 - sleep_duration) / 2.0)
                + cfg.noise * rng.standard_normal()
                + offset
            )
            raw = 1 + int(np.digitize(score, [-1.5, -0.5, 0.5, 1.5]))
            records.append(
                EmaRecord(sid, int(times_s[j]), raw, sleep_rating, sleep_duration, exam, DaySequence(vals, mask))
            )
    return records


def regime_of_window(records: list[EmaRecord], j: int, H: int = 4, delta_max_days: float = 7.0) -> str:
    """Trend class the generator assigns to the window ending at ``records[j]`` (one student)."""
    cfg = SyntheticConfig(H=H, delta_max_days=delta_max_days)
    times_s = np.array([r.timestamp for r in records], dtype=np.int64)
    return _window_trend(times_s, j, cfg)
