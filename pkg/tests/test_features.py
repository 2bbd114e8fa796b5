import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, make_records
from ema2vec.data.synthetic import SyntheticConfig, generate_synthetic
from ema2vec.errors import ContractViolationError, OrderingViolationError
from ema2vec.features import (
    DEFAULT_DELTA_MAX,
    SECONDS_PER_DAY,
    DaySequence,
    build_dataset,
    build_longitudinal_sample,
    daily_functionals,
    delta_histogram,
    scale_delta,
    write_histogram_csv,
)


def _percentile(sorted_vals, p):
    # textbook linear interpolation between closest ranks
    pos = p * (len(sorted_vals) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def reference_functionals(values, mask):
    """Per-definition, loop-based oracle."""
    T, F = values.shape
    out = []
    for c in range(F):
        xs = [float(values[t, c]) for t in range(T) if not mask[t, c]]
        if not xs:
            out.extend([math.nan] * 8)
            continue
        mean = statistics.fmean(xs)
        srt = sorted(xs)
        pairs = crossings = 0
        for t in range(T - 1):
            if mask[t, c] or mask[t + 1, c]:
                continue
            pairs += 1
            a, b = values[t, c] - mean, values[t + 1, c] - mean
            if (a < 0 < b) or (b < 0 < a):
                crossings += 1
        out.extend([
            mean,
            max(xs),
            min(xs),
            statistics.pstdev(xs),
            statistics.median(xs),
            math.fsum(xs),
            _percentile(srt, 0.75) - _percentile(srt, 0.25),
            crossings / pairs if pairs else 0.0,
        ])
    return np.array(out)


def _one(channel):
    arr = np.array(channel, dtype=float)[:, None]
    return daily_functionals(DaySequence(arr, np.zeros_like(arr, dtype=bool))).values


class TestDailyFunctionals:
    def test_one_two_three(self):
        mean, mx, mn, std, med, tot, iqr, mcr = _one([1, 2, 3])
        assert (mean, mx, mn, med, tot) == (2, 3, 1, 2, 6)
        assert std == pytest.approx(math.sqrt(2 / 3), abs=1e-12)
        assert iqr == pytest.approx(1.0, abs=1e-12)
        # centered values (-1, 0, +1): zero never crosses under the strict-sign rule
        assert mcr == 0.0

    def test_constant(self):
        v = _one([5, 5, 5, 5])
        assert v[3] == 0 and v[6] == 0 and v[7] == 0

    def test_alternating(self):
        v = _one([0, 2, 0, 2])
        assert v[0] == 1.0
        assert v[7] == pytest.approx(1.0)

    def test_even_count_median(self):
        assert _one([4, 1, 3, 2])[4] == 2.5

    def test_layout_and_length(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(24, 5))
        out = daily_functionals(DaySequence(vals, np.zeros_like(vals, dtype=bool))).values
        assert out.shape == (40,)
        blocks = out.reshape(5, 8)
        assert np.all(blocks[:, 2] <= blocks[:, 4]) and np.all(blocks[:, 4] <= blocks[:, 1])
        assert np.all(blocks[:, 3] >= 0) and np.all(blocks[:, 6] >= 0)

    def test_masked_cells_excluded(self):
        vals = np.array([[1.0], [100.0], [3.0]])
        mask = np.array([[False], [True], [False]])
        v = daily_functionals(DaySequence(vals, mask)).values
        assert v[0] == 2.0 and v[1] == 3.0
        assert v[7] == 0.0  # no adjacent unmasked pair

    def test_fully_masked_channel_warns(self):
        vals = np.ones((4, 2))
        mask = np.zeros((4, 2), dtype=bool)
        mask[:, 1] = True
        res = daily_functionals(DaySequence(vals, mask))
        assert np.all(np.isnan(res.values[8:]))
        assert np.all(np.isfinite(res.values[:8]))
        assert res.warnings == ["channel 1 fully masked"]

    def test_matches_reference_on_random_masked_days(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            T = int(rng.integers(1, 30))
            F = int(rng.integers(1, 5))
            vals = rng.normal(size=(T, F)) * rng.uniform(0.1, 10)
            if rng.random() < 0.3:
                vals = np.round(vals)  # ties and exact-mean values
            mask = rng.random((T, F)) < rng.uniform(0, 0.6)
            got = daily_functionals(DaySequence(vals, mask)).values
            ref = reference_functionals(vals, mask)
            assert np.array_equal(np.isnan(got), np.isnan(ref))
            ok = ~np.isnan(ref)
            if ok.any():
                worst = max(worst, float(np.max(np.abs(got[ok] - ref[ok]))))
        assert worst < 1e-10


class TestScaleDelta:
    def test_values(self):
        assert scale_delta(0) == 0.0
        assert scale_delta(7 * SECONDS_PER_DAY) == 1.0
        assert math.isnan(scale_delta(8 * SECONDS_PER_DAY))

    def test_boundary_second(self):
        assert scale_delta(DEFAULT_DELTA_MAX) == 1.0
        assert math.isnan(scale_delta(DEFAULT_DELTA_MAX + 1))

    def test_negative(self):
        with pytest.raises(OrderingViolationError):
            scale_delta(-1)

    @given(a=st.floats(0, DEFAULT_DELTA_MAX), b=st.floats(0, DEFAULT_DELTA_MAX))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert scale_delta(lo) <= scale_delta(hi)

    @given(x=st.floats(DEFAULT_DELTA_MAX, 1e9, exclude_min=True))
    def test_missing_above_max(self, x):
        assert math.isnan(scale_delta(x))


class TestLongitudinalSample:
    def test_consecutive_days(self):
        recs = make_records([10, 11, 12, 13, 14])
        s = build_longitudinal_sample(recs, 4, H=4)
        assert np.allclose(s.deltas, [0, 1 / 7, 2 / 7, 3 / 7, 4 / 7], atol=1e-15)
        assert s.step_mask.all()
        assert np.allclose(s.delays_days, [0, 1, 2, 3, 4])

    def test_old_report_masked(self):
        recs = make_records([0, 8, 9, 9.5, 10])
        s = build_longitudinal_sample(recs, 4, H=4)
        assert s.step_mask.tolist() == [True, True, True, True, False]
        assert math.isnan(s.deltas[4])
        assert s.delays_days[4] == 10.0

    def test_second_report(self):
        recs = make_records([0, 1, 2, 3])
        s = build_longitudinal_sample(recs, 1, H=4)
        assert s.step_mask.tolist() == [True, True, False, False, False]
        assert s.deltas[0] == 0.0

    def test_daily_rows_follow_reports(self):
        recs = make_records([0, 1, 2])
        s = build_longitudinal_sample(recs, 2, H=2)
        for h in range(3):
            assert np.array_equal(s.daily[h], daily_functionals(recs[2 - h].day).values)

    def test_never_reads_future(self):
        recs = make_records([0, 1, 2, 3, 4, 5])
        ref = build_longitudinal_sample(recs, 3, H=4, student_median=3.0)
        poisoned = recs[:4] + [type(r)(r.student_id, r.timestamp, r.raw_stress, 0, 0, False, None) for r in recs[4:]]
        got = build_longitudinal_sample(poisoned, 3, H=4, student_median=3.0)
        assert np.array_equal(np.nan_to_num(ref.daily, nan=-9), np.nan_to_num(got.daily, nan=-9))
        assert np.array_equal(ref.deltas, got.deltas, equal_nan=True)
        assert ref.label == got.label

    def test_unsorted_records(self):
        recs = make_records([0, 2, 1])
        with pytest.raises(OrderingViolationError):
            build_longitudinal_sample(recs, 2, H=2)

    def test_label_uses_given_median(self):
        recs = make_records([0, 1, 2], stress=[1, 3, 5])
        assert build_longitudinal_sample(recs, 2, H=2, student_median=3).label == 2
        assert build_longitudinal_sample(recs, 1, H=2, student_median=3).label == 1
        assert build_longitudinal_sample(recs, 0, H=2, student_median=3).label == 0

    def test_bad_index(self):
        with pytest.raises(ContractViolationError):
            build_longitudinal_sample(make_records([0]), 3)

    def test_invariants_on_synthetic(self, small_cohort):
        _, samples = small_cohort
        for s in samples:
            assert s.deltas[0] == 0 and s.step_mask[0]
            valid = s.deltas[s.step_mask]
            assert np.all(np.diff(valid) >= 0)
            assert np.all((valid >= 0) & (valid <= 1))
            # masked steps form a suffix
            first_masked = np.argmin(s.step_mask) if not s.step_mask.all() else s.H + 1
            assert not s.step_mask[first_masked:].any()


class TestDeltaHistogram:
    def _sample(self, delays, mask=None):
        recs = make_records([d for d in delays])
        return build_longitudinal_sample(recs, len(delays) - 1, H=len(delays) - 1)

    def test_direct_count(self):
        s = self._sample([0, 1, 2])  # delays from target: [0, 1, 2]
        edges, counts = delta_histogram([s], 1.0)
        assert edges.tolist() == [0.0, 1.0, 2.0, 3.0]
        assert counts.tolist() == [0, 1, 1]

    def test_empty_valid_set(self):
        s = build_longitudinal_sample(make_records([0]), 0, H=3)
        edges, counts = delta_histogram([s], 1.0)
        assert counts.sum() == 0

    def test_csv(self, tmp_path):
        s = self._sample([0, 1, 2])
        path = tmp_path / "hist.csv"
        write_histogram_csv(path, *delta_histogram([s], 1.0))
        lines = path.read_text().splitlines()
        assert lines[0] == "bin_start_days,bin_end_days,count"
        assert lines[2] == "1.0,2.0,1"

    def test_generator_oracle(self):
        # Steady reporting: delay at lag h is h gaps; each student's mean gap is
        # 1/(r*U) with U ~ Uniform(0.8, 1.25), E[1/U] = ln(1.25/0.8)/0.45.
        r = 2.0
        cfg = SyntheticConfig(n_students=40, study_days=30, reports_per_day=r, regime_mix=(1, 0, 0),
                              absence_rate=0.0, gap_jitter=0.05, seed=5, n_channels=2, n_hours=2)
        samples = build_dataset(generate_synthetic(cfg))
        bw = 1 / 24
        edges, counts = delta_histogram(samples, bw)
        centers = (edges[:-1] + edges[1:]) / 2
        hist_mean = float((centers * counts).sum() / counts.sum())
        mean_gap = math.log(1.25 / 0.8) / 0.45 / r
        full = [s for s in samples if s.step_mask.all()]
        expected = mean_gap * 2.5  # mean over h = 1..4
        assert len(full) > 0.9 * len(samples)
        assert hist_mean == pytest.approx(expected, rel=0.08)
        assert counts.sum() == sum(int(s.step_mask[1:].sum()) for s in samples)
