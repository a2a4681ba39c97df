"""Per-user dwell statistics and the conditional log-normal dwell model.

The self-supervision signal: an impression's binary label says whether the
user converted within a forward horizon of it (widened backwards by a
buffer to absorb logging delay). Per user we accumulate sufficient
statistics of log dwell-time conditioned on that label. From those we fit
an equal-variance Gaussian discriminant over log dwell and read off a
correlation statistic (mean log-dwell gap between the two label classes)
that downstream segmentation thresholds on.

Dwell enters in seconds and on the natural log scale throughout.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, RangeError, SchemaError
from .events import Event, EventSource, build_timelines

DEFAULT_HORIZON_MS = 300_000
DEFAULT_BUFFER_MS = 60_000
DEFAULT_N_MIN = 20

RAW = "raw"
S_NORMALIZED = "s_normalized"
NORMALIZATIONS = (RAW, S_NORMALIZED)


def label_impression(t_ms: int, conversion_times: Sequence[int],
                     horizon_ms: int, buffer_ms: int = 0) -> int:
    """1 iff some conversion lands in [t_ms - buffer_ms, t_ms + horizon_ms].

    conversion_times must be sorted ascending; lookup is a binary search.
    """
    if horizon_ms <= 0:
        raise ConfigError(f"horizon_ms must be positive, got {horizon_ms}")
    if buffer_ms < 0:
        raise ConfigError(f"buffer_ms must be >= 0, got {buffer_ms}")
    lo = t_ms - buffer_ms
    i = bisect_left(conversion_times, lo)
    return int(i < len(conversion_times) and conversion_times[i] <= t_ms + horizon_ms)


@dataclass(slots=True)
class UserStats:
    """Mergeable sufficient statistics of log dwell per label class.

    Streaming updates and merges of partial accumulators commute: any
    split of the same impressions yields the same totals (sums up to
    float rounding). The horizon is carried so that accumulators built
    under different labeling windows cannot be merged by accident.
    """

    user_id: str
    horizon_ms: int = DEFAULT_HORIZON_MS
    n1: int = 0
    n0: int = 0
    sum_logd_1: float = 0.0
    sum_logd_0: float = 0.0
    sumsq_logd_1: float = 0.0
    sumsq_logd_0: float = 0.0

    def add(self, dwell_ms: int, label: int) -> None:
        if dwell_ms is None or dwell_ms <= 0:
            raise RangeError(f"dwell_ms must be positive, got {dwell_ms!r}")
        if label not in (0, 1):
            raise RangeError(f"label must be 0 or 1, got {label!r}")
        x = math.log(dwell_ms / 1000.0)
        if label:
            self.n1 += 1
            self.sum_logd_1 += x
            self.sumsq_logd_1 += x * x
        else:
            self.n0 += 1
            self.sum_logd_0 += x
            self.sumsq_logd_0 += x * x

    def merge(self, other: "UserStats") -> "UserStats":
        if other.user_id != self.user_id:
            raise ConfigError(
                f"cannot merge stats for {other.user_id!r} into {self.user_id!r}"
            )
        if other.horizon_ms != self.horizon_ms:
            raise ConfigError(
                f"cannot merge stats with horizon {other.horizon_ms} into {self.horizon_ms}"
            )
        self.n1 += other.n1
        self.n0 += other.n0
        self.sum_logd_1 += other.sum_logd_1
        self.sum_logd_0 += other.sum_logd_0
        self.sumsq_logd_1 += other.sumsq_logd_1
        self.sumsq_logd_0 += other.sumsq_logd_0
        return self

    def copy(self) -> "UserStats":
        return replace(self)

    @classmethod
    def from_arrays(cls, user_id: str, log_dwells: np.ndarray, labels: np.ndarray,
                    horizon_ms: int = DEFAULT_HORIZON_MS) -> "UserStats":
        """Bulk constructor; equivalent to add() over the pairs."""
        log_dwells = np.asarray(log_dwells, dtype=np.float64)
        mask = np.asarray(labels).astype(bool)
        pos = log_dwells[mask]
        neg = log_dwells[~mask]
        return cls(
            user_id=user_id,
            horizon_ms=horizon_ms,
            n1=int(pos.size),
            n0=int(neg.size),
            sum_logd_1=float(pos.sum()),
            sum_logd_0=float(neg.sum()),
            sumsq_logd_1=float((pos * pos).sum()),
            sumsq_logd_0=float((neg * neg).sum()),
        )

    @property
    def mean1(self) -> float | None:
        return self.sum_logd_1 / self.n1 if self.n1 else None

    @property
    def mean0(self) -> float | None:
        return self.sum_logd_0 / self.n0 if self.n0 else None

    def _var(self, n: int, s: float, sq: float) -> float | None:
        # Bessel-corrected; sumsq >= sum^2/n up to rounding, so clamp at 0.
        if n < 2:
            return None
        return max(0.0, (sq - s * s / n) / (n - 1))

    @property
    def var1(self) -> float | None:
        return self._var(self.n1, self.sum_logd_1, self.sumsq_logd_1)

    @property
    def var0(self) -> float | None:
        return self._var(self.n0, self.sum_logd_0, self.sumsq_logd_0)

    def pooled_variance(self) -> float | None:
        """Per-class variances weighted by their degrees of freedom."""
        v1, v0 = self.var1, self.var0
        if v1 is None or v0 is None:
            return None
        return ((self.n1 - 1) * v1 + (self.n0 - 1) * v0) / (self.n1 + self.n0 - 2)

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "horizon_ms": self.horizon_ms,
            "n1": self.n1,
            "n0": self.n0,
            "sum_logd_1": self.sum_logd_1,
            "sum_logd_0": self.sum_logd_0,
            "sumsq_logd_1": self.sumsq_logd_1,
            "sumsq_logd_0": self.sumsq_logd_0,
        }

    @classmethod
    def from_record(cls, record: Mapping) -> "UserStats":
        try:
            return cls(
                user_id=record["user_id"],
                horizon_ms=int(record["horizon_ms"]),
                n1=int(record["n1"]),
                n0=int(record["n0"]),
                sum_logd_1=float(record["sum_logd_1"]),
                sum_logd_0=float(record["sum_logd_0"]),
                sumsq_logd_1=float(record["sumsq_logd_1"]),
                sumsq_logd_0=float(record["sumsq_logd_0"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad stats record: {exc}") from exc


def correlation(stats: UserStats, n_min: int = DEFAULT_N_MIN,
                normalization: str = RAW) -> float | None:
    """Gap between mean log dwell with and without a conversion nearby.

    Positive: the user lingers longer before converting. Negative: they
    convert after notably shorter dwells. None (undefined) until both
    label classes have at least n_min samples; in the s_normalized
    variant the gap is divided by the pooled standard deviation, which is
    undefined for degenerate (constant-dwell) accumulators.
    """
    if normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {normalization!r}")
    if n_min < 1:
        raise ConfigError(f"n_min must be >= 1, got {n_min}")
    if stats.n1 < n_min or stats.n0 < n_min:
        return None
    gap = stats.sum_logd_1 / stats.n1 - stats.sum_logd_0 / stats.n0
    if normalization == RAW:
        return gap
    pooled = stats.pooled_variance()
    if pooled is None or pooled <= 0.0:
        return None
    return gap / math.sqrt(pooled)


def sigmoid(z: float) -> float:
    """Numerically stable logistic function."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass(frozen=True, slots=True)
class DwellModel:
    """Equal-variance Gaussian discriminant over log dwell (in log-seconds).

    With class-conditional densities N(mu1, S) and N(mu0, S) on x = log
    dwell (S the pooled variance) and class prior prior1, the posterior
    of the positive class collapses to sigmoid(w*x + b) with

        w = (mu1 - mu0) / S
        b = (mu0^2 - mu1^2) / (2 S) + ln(prior1 / (1 - prior1))

    posterior() below is that closed form; it agrees with the explicit
    two-density Bayes ratio to floating-point precision.
    """

    user_id: str
    mu1: float
    mu0: float
    sigma_pooled: float
    prior1: float
    w: float
    b: float

    def posterior(self, dwell_ms: int | float) -> float:
        """P(conversion within the window | dwell), dwell in milliseconds."""
        if dwell_ms is None or dwell_ms <= 0:
            raise RangeError(f"dwell_ms must be positive, got {dwell_ms!r}")
        x = math.log(dwell_ms / 1000.0)
        return sigmoid(self.w * x + self.b)


def fit_model(stats: UserStats, n_min: int = DEFAULT_N_MIN) -> DwellModel | None:
    """Fit the discriminant from sufficient statistics.

    None while either class is below n_min or the pooled variance is
    degenerate (all dwell values identical): no usable model yet.
    """
    if n_min < 1:
        raise ConfigError(f"n_min must be >= 1, got {n_min}")
    if stats.n1 < n_min or stats.n0 < n_min:
        return None
    pooled = stats.pooled_variance()
    if pooled is None or pooled <= 0.0:
        return None
    mu1 = stats.sum_logd_1 / stats.n1
    mu0 = stats.sum_logd_0 / stats.n0
    prior1 = stats.n1 / (stats.n1 + stats.n0)
    w = (mu1 - mu0) / pooled
    b = (mu0 * mu0 - mu1 * mu1) / (2.0 * pooled) + math.log(prior1 / (1.0 - prior1))
    return DwellModel(
        user_id=stats.user_id,
        mu1=mu1,
        mu0=mu0,
        sigma_pooled=math.sqrt(pooled),
        prior1=prior1,
        w=w,
        b=b,
    )


def accumulate_stats(events: Iterable[Event], horizon_ms: int = DEFAULT_HORIZON_MS,
                     buffer_ms: int = DEFAULT_BUFFER_MS,
                     stats_source: EventSource = EventSource.AD_IMPRESSION,
                     n_min: int = DEFAULT_N_MIN) -> dict[str, UserStats]:
    """Label each stats-source impression against the user's conversions
    and fold it into that user's accumulator. Events may arrive in any
    order. n_min is not applied here; accumulators of any size come back.
    """
    del n_min  # thresholding happens at correlation/fit time
    out: dict[str, UserStats] = {}
    for user_id, timeline in build_timelines(events).items():
        stats = UserStats(user_id=user_id, horizon_ms=horizon_ms)
        conversions = timeline.conversion_times
        for imp in timeline.impressions:
            if imp.source is not stats_source:
                continue
            label = label_impression(imp.timestamp_ms, conversions, horizon_ms, buffer_ms)
            stats.add(imp.dwell_ms, label)
        out[user_id] = stats
    return out


def write_stats_snapshot(stats_by_user: Mapping[str, UserStats], fh: TextIO) -> int:
    n = 0
    for user_id in sorted(stats_by_user):
        fh.write(json.dumps(stats_by_user[user_id].to_record(), separators=(",", ":")))
        fh.write("\n")
        n += 1
    return n


def read_stats_snapshot(lines: Iterable[str]) -> dict[str, UserStats]:
    out: dict[str, UserStats] = {}
    for line in lines:
        if not line.strip():
            continue
        stats = UserStats.from_record(json.loads(line))
        out[stats.user_id] = stats
    return out
