"""Threshold segmentation of users by dwell-label correlation magnitude.

Users whose |correlation| clears a threshold epsilon are "active" (their
dwell carries conversion signal in either direction); the rest are
"passive". Epsilon is calibrated per epoch so that a target fraction of
the users with a defined correlation comes out active. Users without a
defined correlation yet are "unknown" and are treated as passive by
every downstream consumer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

from sklearn.base import BaseEstimator

from .errors import ConfigError, SchemaError
from .stats import DEFAULT_N_MIN, RAW, UserStats, correlation
from .validation import check_fraction

DEFAULT_EPOCH_MS = 21_600_000  # 6 hours
DEFAULT_TARGET_ACTIVE_FRACTION = 0.6667


class Segment(str, Enum):
    ACTIVE = "active"
    PASSIVE = "passive"
    UNKNOWN = "unknown"


@dataclass(frozen=True, slots=True)
class EpochCalibration:
    epoch: int
    epsilon: float
    target_active_fraction: float
    achieved_active_fraction: float
    population_size: int

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "epsilon": self.epsilon if math.isfinite(self.epsilon) else "inf",
            "target_active_fraction": self.target_active_fraction,
            "achieved_active_fraction": self.achieved_active_fraction,
            "population_size": self.population_size,
        }


@dataclass(frozen=True, slots=True)
class SegmentAssignment:
    user_id: str
    epoch: int
    segment: Segment
    corr_value: float | None

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "epoch": self.epoch,
            "segment": self.segment.value,
            "corr_value": self.corr_value,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "SegmentAssignment":
        try:
            corr = record.get("corr_value")
            return cls(
                user_id=record["user_id"],
                epoch=int(record["epoch"]),
                segment=Segment(record["segment"]),
                corr_value=None if corr is None else float(corr),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad segment record: {exc}") from exc


def epoch_of(t_ms: int, epoch_ms: int) -> int:
    if epoch_ms <= 0:
        raise ConfigError(f"epoch_ms must be positive, got {epoch_ms}")
    return t_ms // epoch_ms


def calibrate_epsilon(corr_values: Iterable[float], target_active_fraction: float,
                      epoch: int = 0) -> EpochCalibration:
    """Pick epsilon so that about the target fraction of values strictly
    exceeds it in magnitude.

    Order-statistic rule, not an interpolated quantile: with k =
    floor(n * target), epsilon is the (k+1)-th largest |value|, so exactly
    the k larger values clear it when magnitudes are distinct. Ties at
    epsilon fall to passive. An empty collection yields epsilon = +inf
    (nobody active).
    """
    check_fraction("target_active_fraction", target_active_fraction)
    magnitudes = sorted(abs(v) for v in corr_values)
    n = len(magnitudes)
    if n == 0:
        return EpochCalibration(epoch, math.inf, target_active_fraction, 0.0, 0)
    k = int(n * target_active_fraction)  # floor; target < 1 keeps k <= n-1
    epsilon = magnitudes[n - k - 1]
    active = sum(1 for m in magnitudes if m > epsilon)
    return EpochCalibration(epoch, epsilon, target_active_fraction, active / n, n)


def assign_segment(corr_value: float | None, epsilon: float) -> Segment:
    """Threshold one correlation value; undefined values stay unknown."""
    if corr_value is None:
        return Segment.UNKNOWN
    return Segment.ACTIVE if abs(corr_value) > epsilon else Segment.PASSIVE


def run_epoch(stats_snapshot: Iterable[UserStats], target_active_fraction: float,
              epoch: int, n_min: int = DEFAULT_N_MIN, normalization: str = RAW,
              epsilon_override: float | None = None,
              ) -> tuple[EpochCalibration, list[SegmentAssignment]]:
    """Calibrate on a stats snapshot and assign every user in it.

    Pure function of its inputs; users are processed in user_id order so
    repeated runs produce identical output. epsilon_override skips
    calibration and applies a fixed threshold (achieved fraction is then
    measured, not targeted).
    """
    snapshot = sorted(stats_snapshot, key=lambda s: s.user_id)
    corr_by_user = {
        s.user_id: correlation(s, n_min=n_min, normalization=normalization)
        for s in snapshot
    }
    defined = [v for v in corr_by_user.values() if v is not None]
    if epsilon_override is None:
        calibration = calibrate_epsilon(defined, target_active_fraction, epoch)
    else:
        if epsilon_override < 0:
            raise ConfigError(f"epsilon must be >= 0, got {epsilon_override}")
        active = sum(1 for v in defined if abs(v) > epsilon_override)
        achieved = active / len(defined) if defined else 0.0
        calibration = EpochCalibration(
            epoch, epsilon_override, target_active_fraction, achieved, len(defined)
        )
    assignments = [
        SegmentAssignment(
            user_id=s.user_id,
            epoch=epoch,
            segment=assign_segment(corr_by_user[s.user_id], calibration.epsilon),
            corr_value=corr_by_user[s.user_id],
        )
        for s in snapshot
    ]
    return calibration, assignments


class SegmentTable:
    """Epoch-indexed assignment lookup.

    Lookup for (user, epoch) falls back to the user's latest assignment
    at or before that epoch, mirroring a serving table that stays
    published until the next roll. Users never assigned are unknown.
    """

    def __init__(self, assignments: Iterable[SegmentAssignment] = ()) -> None:
        self._by_user: dict[str, list[SegmentAssignment]] = {}
        for assignment in assignments:
            self.add(assignment)

    def add(self, assignment: SegmentAssignment) -> None:
        entries = self._by_user.setdefault(assignment.user_id, [])
        entries.append(assignment)
        entries.sort(key=lambda a: a.epoch)

    def lookup(self, user_id: str, epoch: int) -> Segment:
        entries = self._by_user.get(user_id)
        if not entries:
            return Segment.UNKNOWN
        chosen = None
        for assignment in entries:
            if assignment.epoch <= epoch:
                chosen = assignment
            else:
                break
        return chosen.segment if chosen is not None else Segment.UNKNOWN

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_user.values())

    def __iter__(self) -> Iterator[SegmentAssignment]:
        for user_id in sorted(self._by_user):
            yield from self._by_user[user_id]

    def write(self, fh: TextIO) -> int:
        n = 0
        for assignment in self:
            fh.write(json.dumps(assignment.to_record(), separators=(",", ":")))
            fh.write("\n")
            n += 1
        return n

    @classmethod
    def read(cls, lines: Iterable[str]) -> "SegmentTable":
        table = cls()
        for line in lines:
            if line.strip():
                table.add(SegmentAssignment.from_record(json.loads(line)))
        return table


class ThresholdSegmenter(BaseEstimator):
    """Estimator facade over calibrate/assign.

    fit() takes a sequence of correlation values (None for undefined) and
    calibrates epsilon_; a fixed epsilon parameter skips calibration.
    predict() maps correlation values to Segment labels.
    """

    def __init__(self, target_active_fraction: float = DEFAULT_TARGET_ACTIVE_FRACTION,
                 epsilon: float | None = None) -> None:
        self.target_active_fraction = target_active_fraction
        self.epsilon = epsilon

    def fit(self, X: Sequence[float | None], y=None) -> "ThresholdSegmenter":
        check_fraction("target_active_fraction", self.target_active_fraction)
        defined = [v for v in X if v is not None]
        if self.epsilon is not None:
            if self.epsilon < 0:
                raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
            active = sum(1 for v in defined if abs(v) > self.epsilon)
            self.calibration_ = EpochCalibration(
                0, self.epsilon, self.target_active_fraction,
                active / len(defined) if defined else 0.0, len(defined),
            )
        else:
            self.calibration_ = calibrate_epsilon(defined, self.target_active_fraction)
        self.epsilon_ = self.calibration_.epsilon
        return self

    def predict(self, X: Sequence[float | None]) -> list[Segment]:
        if not hasattr(self, "epsilon_"):
            raise ConfigError("ThresholdSegmenter.predict called before fit")
        return [assign_segment(v, self.epsilon_) for v in X]
