"""Threshold calibration and per-epoch segment assignment."""

import io
import math
import random

import numpy as np
import pytest

from dwellgate.errors import ConfigError
from dwellgate.segmentation import (
    EpochCalibration,
    Segment,
    SegmentAssignment,
    SegmentTable,
    ThresholdSegmenter,
    assign_segment,
    calibrate_epsilon,
    epoch_of,
    run_epoch,
)
from dwellgate.stats import UserStats


def stats_with_gap(user, gap, n=50, base=1.0, var=0.25):
    """Accumulator whose raw correlation is exactly ``gap``."""
    mean1, mean0 = base + gap, base
    return UserStats(
        user_id=user,
        n1=n,
        n0=n,
        sum_logd_1=n * mean1,
        sum_logd_0=n * mean0,
        sumsq_logd_1=(n - 1) * var + n * mean1 * mean1,
        sumsq_logd_0=(n - 1) * var + n * mean0 * mean0,
    )


class TestCalibrate:
    def test_three_values_two_thirds(self):
        calibration = calibrate_epsilon([0.1, 0.2, 0.3], 2 / 3)
        assert calibration.epsilon == 0.1
        assert math.isclose(calibration.achieved_active_fraction, 2 / 3)
        assert calibration.population_size == 3

    def test_uses_magnitudes(self):
        calibration = calibrate_epsilon([-0.3, 0.1, -0.2], 2 / 3)
        assert calibration.epsilon == 0.1

    def test_all_identical_end_up_passive(self):
        calibration = calibrate_epsilon([0.5, 0.5, 0.5], 2 / 3)
        assert calibration.epsilon == 0.5
        assert calibration.achieved_active_fraction == 0.0

    def test_single_value(self):
        calibration = calibrate_epsilon([0.5], 0.5)
        assert calibration.epsilon == 0.5
        assert calibration.achieved_active_fraction == 0.0

    def test_empty_population(self):
        calibration = calibrate_epsilon([], 0.5)
        assert calibration.epsilon == math.inf
        assert calibration.achieved_active_fraction == 0.0
        assert calibration.population_size == 0

    def test_fraction_control_on_distinct_values(self):
        rng = random.Random(431)
        for _ in range(100):
            n = rng.randrange(2, 400)
            values = rng.sample(range(10**6), n)
            corr = [v / 10**6 + 1e-9 for v in values]
            target = rng.uniform(0.05, 0.95)
            calibration = calibrate_epsilon(corr, target)
            assert abs(calibration.achieved_active_fraction - target) <= 1.0 / n + 1e-12

    def test_achieved_never_exceeds_target_floor(self):
        # k = floor(n * target) values clear epsilon when magnitudes are
        # distinct, so achieved <= target always holds there.
        rng = random.Random(432)
        for _ in range(50):
            n = rng.randrange(1, 100)
            corr = rng.sample(range(1, 10**6), n)
            target = rng.uniform(0.05, 0.95)
            calibration = calibrate_epsilon(corr, target)
            assert calibration.achieved_active_fraction <= target + 1e-12

    def test_invalid_target(self):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                calibrate_epsilon([0.1], bad)

    def test_record_serializes_infinity(self):
        record = calibrate_epsilon([], 0.5).to_record()
        assert record["epsilon"] == "inf"


class TestAssign:
    def test_negative_correlation_is_active(self):
        assert assign_segment(-0.8, 0.3) is Segment.ACTIVE

    def test_zero_is_passive(self):
        for eps in (0.0, 0.1, 5.0):
            assert assign_segment(0.0, eps) is Segment.PASSIVE

    def test_undefined_is_unknown(self):
        assert assign_segment(None, 0.3) is Segment.UNKNOWN

    def test_tie_at_threshold_is_passive(self):
        assert assign_segment(0.3, 0.3) is Segment.PASSIVE
        assert assign_segment(-0.3, 0.3) is Segment.PASSIVE

    def test_raising_epsilon_never_activates(self):
        rng = random.Random(433)
        for _ in range(500):
            corr = rng.choice([None, rng.uniform(-1, 1)])
            lo = rng.uniform(0, 1)
            hi = lo + rng.uniform(0, 1)
            if assign_segment(corr, lo) is Segment.PASSIVE:
                assert assign_segment(corr, hi) is Segment.PASSIVE


class TestRunEpoch:
    def test_three_regimes(self):
        snapshot = [
            stats_with_gap("pos", 0.7),
            stats_with_gap("low", 0.01),
            stats_with_gap("neg", -0.6),
        ]
        calibration, assignments = run_epoch(snapshot, 2 / 3, epoch=0)
        by_user = {a.user_id: a.segment for a in assignments}
        assert by_user == {
            "pos": Segment.ACTIVE,
            "low": Segment.PASSIVE,
            "neg": Segment.ACTIVE,
        }
        assert math.isclose(calibration.epsilon, 0.01, abs_tol=1e-12)

    def test_deterministic(self):
        rng = random.Random(434)
        snapshot = [stats_with_gap(f"u{i}", rng.uniform(-1, 1)) for i in range(50)]
        first = run_epoch(snapshot, 0.6667, epoch=3)
        second = run_epoch(list(reversed(snapshot)), 0.6667, epoch=3)
        assert first == second

    def test_every_user_assigned_once(self):
        snapshot = [stats_with_gap(f"u{i}", i / 10) for i in range(10)]
        _, assignments = run_epoch(snapshot, 0.5, epoch=2)
        assert sorted(a.user_id for a in assignments) == sorted(s.user_id for s in snapshot)
        assert all(a.epoch == 2 for a in assignments)

    def test_all_unknown_snapshot(self):
        snapshot = [UserStats(user_id=f"u{i}") for i in range(5)]
        calibration, assignments = run_epoch(snapshot, 0.5, epoch=0)
        assert calibration.epsilon == math.inf
        assert all(a.segment is Segment.UNKNOWN for a in assignments)
        assert all(a.corr_value is None for a in assignments)

    def test_epsilon_override(self):
        snapshot = [
            stats_with_gap("a", 0.9),
            stats_with_gap("b", 0.2),
            stats_with_gap("c", -0.5),
        ]
        calibration, assignments = run_epoch(snapshot, 0.5, epoch=0,
                                             epsilon_override=0.4)
        assert calibration.epsilon == 0.4
        by_user = {a.user_id: a.segment for a in assignments}
        assert by_user["a"] is Segment.ACTIVE
        assert by_user["b"] is Segment.PASSIVE
        assert by_user["c"] is Segment.ACTIVE
        with pytest.raises(ConfigError):
            run_epoch(snapshot, 0.5, epoch=0, epsilon_override=-1.0)

    def test_assignment_consistent_with_calibration(self):
        rng = random.Random(435)
        snapshot = [stats_with_gap(f"u{i:03d}", rng.uniform(-1, 1)) for i in range(80)]
        calibration, assignments = run_epoch(snapshot, 0.6667, epoch=0)
        for a in assignments:
            expected = assign_segment(a.corr_value, calibration.epsilon)
            assert a.segment is expected


class TestEpochOf:
    def test_floor_division(self):
        assert epoch_of(0, 1000) == 0
        assert epoch_of(999, 1000) == 0
        assert epoch_of(1000, 1000) == 1
        assert epoch_of(21_600_000 * 4 + 1, 21_600_000) == 4

    def test_bad_epoch_length(self):
        with pytest.raises(ConfigError):
            epoch_of(5, 0)


class TestSegmentTable:
    def entry(self, user, epoch, segment, corr=0.5):
        return SegmentAssignment(user_id=user, epoch=epoch, segment=segment,
                                 corr_value=corr)

    def test_lookup_falls_back_to_latest_published(self):
        table = SegmentTable([
            self.entry("u1", 0, Segment.PASSIVE),
            self.entry("u1", 3, Segment.ACTIVE),
        ])
        assert table.lookup("u1", 0) is Segment.PASSIVE
        assert table.lookup("u1", 2) is Segment.PASSIVE
        assert table.lookup("u1", 3) is Segment.ACTIVE
        assert table.lookup("u1", 99) is Segment.ACTIVE

    def test_unknown_before_first_epoch_and_for_strangers(self):
        table = SegmentTable([self.entry("u1", 2, Segment.ACTIVE)])
        assert table.lookup("u1", 1) is Segment.UNKNOWN
        assert table.lookup("nobody", 5) is Segment.UNKNOWN

    def test_round_trip(self):
        rng = random.Random(436)
        entries = [
            self.entry(f"u{rng.randrange(10)}", epoch, rng.choice(list(Segment)),
                       corr=rng.choice([None, rng.uniform(-1, 1)]))
            for epoch in range(4) for _ in range(5)
        ]
        table = SegmentTable(entries)
        buf = io.StringIO()
        n = table.write(buf)
        assert n == len(entries)
        again = SegmentTable.read(buf.getvalue().splitlines())
        assert list(again) == list(table)
        for user in {e.user_id for e in entries}:
            for epoch in range(6):
                assert again.lookup(user, epoch) is table.lookup(user, epoch)

    def test_iteration_sorted_by_user(self):
        table = SegmentTable([
            self.entry("zz", 0, Segment.ACTIVE),
            self.entry("aa", 1, Segment.PASSIVE),
            self.entry("aa", 0, Segment.UNKNOWN, corr=None),
        ])
        listed = list(table)
        assert [(a.user_id, a.epoch) for a in listed] == [("aa", 0), ("aa", 1), ("zz", 0)]


class TestThresholdSegmenter:
    def test_fit_then_predict(self):
        seg = ThresholdSegmenter(target_active_fraction=2 / 3)
        seg.fit([0.7, 0.01, -0.6, None])
        assert math.isclose(seg.epsilon_, 0.01, abs_tol=1e-12)
        assert seg.predict([0.7, 0.01, -0.6, None]) == [
            Segment.ACTIVE, Segment.PASSIVE, Segment.ACTIVE, Segment.UNKNOWN,
        ]

    def test_fixed_epsilon_skips_calibration(self):
        seg = ThresholdSegmenter(epsilon=0.4).fit([0.9, 0.2, -0.5])
        assert seg.epsilon_ == 0.4
        assert math.isclose(seg.calibration_.achieved_active_fraction, 2 / 3)

    def test_predict_before_fit(self):
        with pytest.raises(ConfigError):
            ThresholdSegmenter().predict([0.5])

    def test_get_params_round_trip(self):
        seg = ThresholdSegmenter(target_active_fraction=0.5, epsilon=0.25)
        params = seg.get_params()
        assert params == {"target_active_fraction": 0.5, "epsilon": 0.25}
        clone = ThresholdSegmenter(**params).fit([0.1, 0.3])
        assert clone.epsilon_ == 0.25

    def test_matches_run_epoch(self):
        rng = random.Random(437)
        corr = [rng.choice([None, rng.uniform(-1, 1)]) for _ in range(100)]
        seg = ThresholdSegmenter(target_active_fraction=0.6667).fit(corr)
        snapshot = [
            stats_with_gap(f"u{i:03d}", v) if v is not None
            else UserStats(user_id=f"u{i:03d}")
            for i, v in enumerate(corr)
        ]
        calibration, assignments = run_epoch(snapshot, 0.6667, epoch=0)
        assert math.isclose(seg.epsilon_, calibration.epsilon, rel_tol=1e-9)
        predicted = seg.predict(corr)
        by_user = {a.user_id: a.segment for a in assignments}
        for i, segment in enumerate(predicted):
            assert by_user[f"u{i:03d}"] is segment


class TestFractionAtScale:
    def test_mixed_regime_population(self):
        # A third each of positive, flat and negative users; the low third
        # sits in sampling noise around zero, so the 2/3 target lands the
        # threshold in the gap and both signed regimes come out active.
        rng = np.random.default_rng(438)
        n_users, n_imp = 600, 200
        snapshot, regimes = [], []
        for i in range(n_users):
            regime = ("positive", "low", "negative")[i % 3]
            delta = {"positive": 0.7, "low": 0.0, "negative": -0.7}[regime]
            labels = rng.random(n_imp) < 0.25
            logd = rng.normal(1.0, 0.5, n_imp) + delta * labels
            snapshot.append(UserStats.from_arrays(f"u{i:04d}", logd, labels))
            regimes.append(regime)
        calibration, assignments = run_epoch(snapshot, 2 / 3, epoch=0)
        assert abs(calibration.achieved_active_fraction - 2 / 3) < 0.02
        for assignment, regime in zip(assignments, regimes):
            if regime == "negative":
                assert assignment.segment is Segment.ACTIVE
                assert assignment.corr_value < 0
