"""In-memory EMA record type, covariate assembly and label mapping."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from ..features import DaySequence

COVARIATE_NAMES = (
    "dow_mon", "dow_tue", "dow_wed", "dow_thu", "dow_fri", "dow_sat", "dow_sun",
    "sleep_rating", "sleep_duration", "exam_flag",
)
N_COVARIATES = len(COVARIATE_NAMES)


@dataclass
class EmaRecord:
    """A single stress self-report and the sensing day that precedes it.

    ``day`` is either a raw :class:`DaySequence` or an already-computed
    day-level feature vector (as shipped by preprocessed releases).
    """

    student_id: str
    timestamp: int
    raw_stress: int
    sleep_rating: float
    sleep_duration: float
    exam_flag: bool
    day: "DaySequence | np.ndarray | None" = None

    @property
    def record_id(self) -> str:
        return make_record_id(self.student_id, self.timestamp)


def make_record_id(student_id: str, timestamp: int) -> str:
    return f"{student_id}:{int(timestamp)}"


def covariate_vector(record: EmaRecord) -> np.ndarray:
    """Day-of-week one-hot (UTC, Monday first), sleep rating, sleep duration, exam flag."""
    dow = _dt.datetime.fromtimestamp(int(record.timestamp), tz=_dt.timezone.utc).weekday()
    vec = np.zeros(N_COVARIATES)
    vec[dow] = 1.0
    vec[7] = float(record.sleep_rating)
    vec[8] = float(record.sleep_duration)
    vec[9] = 1.0 if record.exam_flag else 0.0
    return vec


def map_label(raw_stress: int, student_median: float) -> int:
    """Three-way split around the student's median: below 0, equal 1, above 2."""
    if raw_stress < student_median:
        return 0
    if raw_stress == student_median:
        return 1
    return 2


def student_medians(records: Iterable[EmaRecord]) -> dict[str, float]:
    by_student: dict[str, list[int]] = {}
    for rec in records:
        by_student.setdefault(rec.student_id, []).append(rec.raw_stress)
    return {sid: float(np.median(vals)) for sid, vals in by_student.items()}


def group_by_student(records: Sequence[EmaRecord]) -> dict[str, list[EmaRecord]]:
    """Records per student, each list sorted by timestamp; students in first-seen order."""
    groups: dict[str, list[EmaRecord]] = {}
    for rec in records:
        groups.setdefault(rec.student_id, []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: r.timestamp)
    return groups
