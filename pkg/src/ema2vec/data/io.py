"""On-disk formats.

``records.csv``
    ``student_id,timestamp,raw_stress,sleep_rating,sleep_duration,exam_flag``;
    timestamps are integer UTC seconds, ``exam_flag`` is 0/1.
``days.jsonl``
    one JSON object per record, keyed by ``record_id`` (``"<student_id>:<timestamp>"``),
    holding either ``values`` (T x F, ``null`` for missing) and ``mask``
    (T x F of 0/1, 1 = missing), or a precomputed day-level vector under
    ``functionals``.
``samples.jsonl``
    longitudinal samples, one per line (see :func:`sample_to_json`).

Floats are written with ``repr`` so every value round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import SchemaError
from ..features import DaySequence, LongitudinalSample
from .records import EmaRecord

DATA_DIR_ENV = "EMA2VEC_DATA_DIR"
RECORDS_FILE = "records.csv"
DAYS_FILE = "days.jsonl"
SAMPLES_FILE = "samples.jsonl"
RECORD_COLUMNS = ("student_id", "timestamp", "raw_stress", "sleep_rating", "sleep_duration", "exam_flag")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _num(x: float):
    x = float(x)
    return x if math.isfinite(x) else None


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(records: Sequence[EmaRecord], data_dir: str | Path) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with open(data_dir / RECORDS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.student_id, int(r.timestamp), int(r.raw_stress), repr(float(r.sleep_rating)),
                        repr(float(r.sleep_duration)), int(bool(r.exam_flag))])
    with open(data_dir / DAYS_FILE, "w") as fh:
        for r in records:
            if r.day is None:
                continue
            if isinstance(r.day, DaySequence):
                obj = {
                    "record_id": r.record_id,
                    "values": [[None if m else _num(v) for v, m in zip(row, mrow)]
                               for row, mrow in zip(r.day.values.tolist(), r.day.mask.tolist())],
                    "mask": r.day.mask.astype(int).tolist(),
                }
            else:
                obj = {"record_id": r.record_id, "functionals": [_num(v) for v in np.asarray(r.day).tolist()]}
            fh.write(_dumps(obj) + "\n")


def _parse_day(obj: dict, path: Path, row: int):
    if "functionals" in obj:
        vals = obj["functionals"]
        if not isinstance(vals, list) or not vals:
            raise SchemaError("'functionals' must be a nonempty list", str(path), row)
        return _to_arr(vals)
    if "values" not in obj:
        raise SchemaError("day entry needs 'values' or 'functionals'", str(path), row)
    vals = obj["values"]
    if not isinstance(vals, list) or not vals or not all(isinstance(r, list) for r in vals):
        raise SchemaError("'values' must be a nonempty list of lists", str(path), row)
    width = len(vals[0])
    if width == 0 or any(len(r) != width for r in vals):
        raise SchemaError("'values' rows must all have the same nonzero length", str(path), row)
    arr = _to_arr(vals)
    mask = obj.get("mask")
    if mask is None:
        mask_arr = ~np.isfinite(arr)
    else:
        mask_arr = np.array(mask, dtype=bool)
        if mask_arr.shape != arr.shape:
            raise SchemaError(f"mask shape {mask_arr.shape} != values shape {arr.shape}", str(path), row)
        if np.any(~mask_arr & ~np.isfinite(arr)):
            raise SchemaError("unmasked missing value", str(path), row)
    return DaySequence(np.where(mask_arr, 0.0, arr), mask_arr)


def load_dataset(data_dir: str | Path, require_days: bool = True) -> list[EmaRecord]:
    """Read and validate ``records.csv`` and ``days.jsonl`` from ``data_dir``.

    Rows are numbered from 1 for the CSV header; JSON lines from 1.
    """
    data_dir = Path(data_dir)
    rec_path = data_dir / RECORDS_FILE
    days_path = data_dir / DAYS_FILE
    if not rec_path.exists():
        raise FileNotFoundError(str(rec_path))
    records: list[EmaRecord] = []
    last_ts: dict[str, int] = {}
    with open(rec_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_COLUMNS:
            raise SchemaError(f"header must be {','.join(RECORD_COLUMNS)}", str(rec_path), 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_COLUMNS):
                raise SchemaError(f"expected {len(RECORD_COLUMNS)} fields, got {len(row)}", str(rec_path), lineno)
            sid, ts, stress, rating, dur, exam = row
            try:
                ts_i = int(ts)
                stress_i = int(stress)
                rating_f = float(rating)
                dur_f = float(dur)
                exam_i = int(exam)
            except ValueError as exc:
                raise SchemaError(f"bad field value ({exc})", str(rec_path), lineno) from None
            if not sid:
                raise SchemaError("empty student_id", str(rec_path), lineno)
            if not 1 <= stress_i <= 5:
                raise SchemaError(f"raw_stress {stress_i} outside 1..5", str(rec_path), lineno)
            if exam_i not in (0, 1):
                raise SchemaError(f"exam_flag must be 0 or 1, got {exam_i}", str(rec_path), lineno)
            if sid in last_ts and ts_i <= last_ts[sid]:
                raise SchemaError(f"timestamp {ts_i} not after previous {last_ts[sid]} for student {sid}",
                                  str(rec_path), lineno)
            last_ts[sid] = ts_i
            records.append(EmaRecord(sid, ts_i, stress_i, rating_f, dur_f, bool(exam_i)))

    if days_path.exists():
        by_id = {r.record_id: r for r in records}
        with open(days_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"invalid JSON ({exc.msg})", str(days_path), lineno) from None
                rid = obj.get("record_id")
                if rid not in by_id:
                    raise SchemaError(f"unknown record_id {rid!r}", str(days_path), lineno)
                by_id[rid].day = _parse_day(obj, days_path, lineno)
    if require_days:
        missing = [r.record_id for r in records if r.day is None]
        if missing:
            raise SchemaError(f"{len(missing)} record(s) without a day entry, first {missing[0]}", str(days_path))
    return records


# ---------------------------------------------------------------------------
# Longitudinal sample store


def _arr(a) -> list:
    return [[_num(v) for v in row] for row in np.asarray(a).tolist()] if np.ndim(a) == 2 else [_num(v) for v in np.asarray(a).tolist()]


def sample_to_json(s: LongitudinalSample) -> dict:
    obj = {
        "student_id": s.student_id,
        "target_time": int(s.target_time),
        "raw_stress": int(s.raw_stress),
        "label": int(s.label),
        "daily": _arr(s.daily),
        "deltas": _arr(s.deltas),
        "delays_days": _arr(s.delays_days),
        "step_mask": [bool(m) for m in s.step_mask],
        "covariates": _arr(s.covariates),
    }
    if s.target_day is not None:
        obj["target_day"] = {
            "values": _arr(np.where(s.target_day.mask, np.nan, s.target_day.values)),
            "mask": s.target_day.mask.astype(int).tolist(),
        }
    return obj


def _to_arr(x) -> np.ndarray:
    # numpy maps None to NaN for float dtype
    return np.array(x, dtype=np.float64)


def sample_from_json(obj: dict) -> LongitudinalSample:
    day = None
    if "target_day" in obj:
        vals = _to_arr(obj["target_day"]["values"])
        mask = np.array(obj["target_day"]["mask"], dtype=bool)
        day = DaySequence(np.where(mask, 0.0, vals), mask)
    return LongitudinalSample(
        daily=_to_arr(obj["daily"]),
        deltas=_to_arr(obj["deltas"]),
        delays_days=_to_arr(obj["delays_days"]),
        step_mask=np.array(obj["step_mask"], dtype=bool),
        covariates=_to_arr(obj["covariates"]),
        label=int(obj["label"]),
        raw_stress=int(obj["raw_stress"]),
        student_id=str(obj["student_id"]),
        target_time=int(obj["target_time"]),
        target_day=day,
    )


def save_samples(samples: Iterable[LongitudinalSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(_dumps(sample_to_json(s)) + "\n")


def load_samples(path: str | Path) -> list[LongitudinalSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"malformed sample ({exc})", str(path), lineno) from None
    return out
