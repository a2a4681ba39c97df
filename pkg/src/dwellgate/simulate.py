"""Synthetic event-stream generator with known ground truth.

Each user gets independent Poisson processes of conversions and of
impressions across the three impression sources. An impression is
"positive" when a conversion follows within the forecast horizon; ad
impressions then draw their log dwell from N(mu0 + delta, sigma) instead
of N(mu0, sigma), where delta comes from the user's regime at that
moment: positive regime +0.7, low 0.0, negative -0.7 by default. So a
user's dwell carries conversion signal exactly when their regime is
non-low, and the sign of the injected correlation is the regime's sign.

Ad impressions carry eleven base attributes: attr_01..attr_07 weakly
informative of the impression label, attr_08..attr_11 pure noise. Every
impression also carries one extended attribute (boost_01) that is a
lightly corrupted copy of the label for users flagged
informative_boost_attrs, and coin-flip noise for everyone else.

Generation is deterministic: every user draws from an RNG seeded by a
stable hash of (stream seed, user id), so streams are reproducible
byte-for-byte and stable under population edits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, SchemaError
from .events import Event, EventSource
from .stats import DEFAULT_HORIZON_MS

REGIMES = ("positive", "low", "negative")
DEFAULT_DELTAS = {"positive": 0.7, "low": 0.0, "negative": -0.7}

DEFAULT_SOURCE_MIX = {
    EventSource.AD_IMPRESSION: 0.5,
    EventSource.ORGANIC_IMPRESSION: 0.3,
    EventSource.NEW_PAGE_IMPRESSION: 0.2,
}

MEDIA_TYPES = ("image", "text", "video")
CONVERSION_KINDS = ("click", "like", "share")

SIGNAL_ATTR_COUNT = 7
NOISE_ATTR_COUNT = 4
NOISE_BUCKETS = 20
SIGNAL_FLIP = 0.45  # P(signal attr disagrees with the label)
BOOST_FLIP = 0.10   # P(informative boost attr disagrees with the label)

OUTLIER_LOW_MS = (1, 10)
OUTLIER_HIGH_MS = (7_200_000, 28_800_000)  # 2h .. 8h


@dataclass(frozen=True)
class UserProfile:
    """Behavioral parameters of one simulated user.

    regime_schedule is a sorted tuple of (start_ms, regime) segments; the
    first entry must start at 0. conversion_rate and impression_rate are
    events per hour; impression_rate is split across impression sources
    by source_mix. informative_boost_attrs defaults to True for users
    that ever leave the low regime.
    """

    user_id: str
    regime_schedule: tuple[tuple[int, str], ...] = ((0, "positive"),)
    mu0: float = 1.0
    sigma: float = 0.5
    deltas: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DELTAS))
    conversion_rate: float = 3.0
    impression_rate: float = 32.0
    source_mix: Mapping[EventSource, float] = field(
        default_factory=lambda: dict(DEFAULT_SOURCE_MIX)
    )
    informative_boost_attrs: bool | None = None

    def __post_init__(self) -> None:
        if not self.user_id:
            raise ConfigError("user_id must be non-empty")
        if not self.regime_schedule:
            raise ConfigError("regime_schedule must have at least one entry")
        if self.regime_schedule[0][0] != 0:
            raise ConfigError("regime_schedule must start at 0 ms")
        starts = [s for s, _ in self.regime_schedule]
        if starts != sorted(starts):
            raise ConfigError("regime_schedule must be sorted by start_ms")
        for _, regime in self.regime_schedule:
            if regime not in self.deltas:
                raise ConfigError(f"regime {regime!r} has no delta")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.conversion_rate <= 0 or self.impression_rate <= 0:
            raise ConfigError("rates must be positive")
        mix_total = sum(self.source_mix.values())
        if not math.isclose(mix_total, 1.0, abs_tol=1e-9):
            raise ConfigError(f"source_mix must sum to 1, got {mix_total}")

    @property
    def informative(self) -> bool:
        if self.informative_boost_attrs is not None:
            return self.informative_boost_attrs
        return any(regime != "low" for _, regime in self.regime_schedule)

    def to_record(self) -> dict:
        return {
            "record": "profile",
            "user_id": self.user_id,
            "regime_schedule": [[s, r] for s, r in self.regime_schedule],
            "mu0": self.mu0,
            "sigma": self.sigma,
            "deltas": dict(self.deltas),
            "conversion_rate": self.conversion_rate,
            "impression_rate": self.impression_rate,
            "source_mix": {src.value: w for src, w in self.source_mix.items()},
            "informative_boost_attrs": self.informative,
        }


@dataclass(frozen=True, slots=True)
class TruthRecord:
    """Ground truth for one impression: its label under the clean stream."""

    user_id: str
    timestamp_ms: int
    source: str
    label: int
    regime: str

    def to_record(self) -> dict:
        return {
            "record": "impression",
            "user_id": self.user_id,
            "timestamp_ms": self.timestamp_ms,
            "source": self.source,
            "label": self.label,
            "regime": self.regime,
        }


@dataclass(frozen=True, slots=True)
class InjectionRecord:
    """What inject_logging_artifacts did to one impression."""

    index: int
    delay_ms: int
    outlier_kind: str | None
    original_timestamp_ms: int
    original_dwell_ms: int

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "delay_ms": self.delay_ms,
            "outlier_kind": self.outlier_kind,
            "original_timestamp_ms": self.original_timestamp_ms,
            "original_dwell_ms": self.original_dwell_ms,
        }


def derive_seed(seed: int, *parts: str) -> int:
    """Stable 64-bit stream seed from a base seed and string parts."""
    digest = hashlib.blake2b(
        ":".join([str(seed), *parts]).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def make_population(n_users: int,
                    regime_cycle: Sequence[str] = REGIMES,
                    **overrides) -> list[UserProfile]:
    """n_users profiles cycling through regime_cycle, deterministic ids."""
    if n_users <= 0:
        raise ConfigError(f"n_users must be positive, got {n_users}")
    width = max(4, len(str(n_users - 1)))
    profiles = []
    for i in range(n_users):
        regime = regime_cycle[i % len(regime_cycle)]
        profiles.append(UserProfile(
            user_id=f"user_{i:0{width}d}",
            regime_schedule=((0, regime),),
            **overrides,
        ))
    return profiles


def load_population(raw: Mapping, n_users: int | None = None) -> list[UserProfile]:
    """Build a population from a declarative description.

    Expected shape: optional ``defaults`` mapping of UserProfile fields,
    and ``profiles``: a list of groups, each with a ``count`` and any
    per-group overrides (``regimes`` as [[start_ms, regime], ...]).
    """
    if not isinstance(raw, Mapping):
        raise ConfigError("population description must be a mapping")
    unknown = set(raw) - {"defaults", "profiles"}
    if unknown:
        raise ConfigError(f"unknown population keys: {sorted(unknown)}")
    defaults = dict(raw.get("defaults") or {})
    groups = raw.get("profiles")
    if not groups:
        raise ConfigError("population description needs a non-empty 'profiles' list")

    profiles: list[UserProfile] = []
    total = sum(int(g.get("count", 1)) for g in groups)
    width = max(4, len(str(total - 1)))
    i = 0
    for group in groups:
        group = dict(group)
        count = int(group.pop("count", 1))
        if count <= 0:
            raise ConfigError(f"profile group count must be positive, got {count}")
        schedule = group.pop("regimes", None)
        fields_ = dict(defaults)
        fields_.update(group)
        if schedule is not None:
            fields_["regime_schedule"] = tuple((int(s), str(r)) for s, r in schedule)
        if "source_mix" in fields_:
            fields_["source_mix"] = {
                EventSource(k): float(v) for k, v in fields_["source_mix"].items()
            }
        for _ in range(count):
            try:
                profiles.append(UserProfile(user_id=f"user_{i:0{width}d}", **fields_))
            except TypeError as exc:
                raise ConfigError(f"bad profile field: {exc}") from exc
            i += 1
    if n_users is not None and n_users != len(profiles):
        raise ConfigError(
            f"--users {n_users} disagrees with profile counts ({len(profiles)})"
        )
    return profiles


def _poisson_times(rng: np.random.Generator, rate_per_hour: float,
                   duration_ms: int) -> np.ndarray:
    lam = rate_per_hour * duration_ms / 3_600_000.0
    n = rng.poisson(lam)
    return np.sort(rng.uniform(0.0, duration_ms, n)).astype(np.int64)


def _window_labels(times: np.ndarray, conversions: np.ndarray,
                   horizon_ms: int) -> np.ndarray:
    """label[i] = 1 iff a conversion falls in [t_i, t_i + horizon]."""
    if conversions.size == 0:
        return np.zeros(times.size, dtype=np.int64)
    idx = np.searchsorted(conversions, times, side="left")
    hit = idx < conversions.size
    labels = np.zeros(times.size, dtype=np.int64)
    safe = np.minimum(idx, conversions.size - 1)
    labels[hit] = (conversions[safe] <= times + horizon_ms)[hit]
    return labels


def _regime_index(schedule: tuple[tuple[int, str], ...], times: np.ndarray) -> np.ndarray:
    starts = np.array([s for s, _ in schedule], dtype=np.int64)
    return np.maximum(np.searchsorted(starts, times, side="right") - 1, 0)


def _dwell_ms(rng: np.random.Generator, mu: np.ndarray, sigma: float) -> np.ndarray:
    x = rng.normal(0.0, 1.0, mu.size) * sigma + mu
    return np.maximum(np.rint(np.exp(x) * 1000.0), 1).astype(np.int64)


def generate_events(profiles: Sequence[UserProfile], duration_ms: int, seed: int,
                    horizon_ms: int = DEFAULT_HORIZON_MS,
                    ) -> tuple[list[Event], list[TruthRecord]]:
    """Generate a merged, timestamp-sorted event stream plus ground truth.

    Truth records appear in stream order and cover every impression.
    """
    if duration_ms <= 0:
        raise ConfigError(f"duration_ms must be positive, got {duration_ms}")
    seen: set[str] = set()
    for profile in profiles:
        if profile.user_id in seen:
            raise ConfigError(f"duplicate user_id {profile.user_id!r}")
        seen.add(profile.user_id)

    keyed: list[tuple[int, str, int, Event, TruthRecord | None]] = []
    for profile in profiles:
        rng = np.random.default_rng(derive_seed(seed, profile.user_id))
        seq = 0
        conversions = _poisson_times(rng, profile.conversion_rate, duration_ms)
        imp_times = {
            source: _poisson_times(
                rng, profile.impression_rate * profile.source_mix.get(source, 0.0),
                duration_ms,
            )
            for source in (
                EventSource.AD_IMPRESSION,
                EventSource.ORGANIC_IMPRESSION,
                EventSource.NEW_PAGE_IMPRESSION,
            )
        }
        kinds = rng.integers(0, len(CONVERSION_KINDS), conversions.size)
        for t, kind in zip(conversions.tolist(), kinds.tolist()):
            event = Event(
                user_id=profile.user_id,
                source=EventSource.CONVERSION,
                timestamp_ms=t,
                conversion_kind=CONVERSION_KINDS[kind],
            )
            keyed.append((t, profile.user_id, seq, event, None))
            seq += 1

        schedule = profile.regime_schedule
        deltas = np.array([profile.deltas[r] for _, r in schedule])
        for source, times in imp_times.items():
            n = times.size
            labels = _window_labels(times, conversions, horizon_ms)
            regime_idx = _regime_index(schedule, times)
            if source is EventSource.AD_IMPRESSION:
                mu = profile.mu0 + deltas[regime_idx] * labels
            else:
                mu = np.full(n, profile.mu0)
            dwells = _dwell_ms(rng, mu, profile.sigma)

            # Attribute draws happen for every impression so that profile
            # flags change values, never the draw sequence.
            if source is EventSource.AD_IMPRESSION:
                signal_bits = labels[:, None] ^ (
                    rng.random((n, SIGNAL_ATTR_COUNT)) < SIGNAL_FLIP
                )
                noise_vals = rng.integers(0, NOISE_BUCKETS, (n, NOISE_ATTR_COUNT))
            else:
                signal_bits = noise_vals = None
                if source is EventSource.ORGANIC_IMPRESSION:
                    content = rng.integers(0, 500, n)
                    media = rng.integers(0, len(MEDIA_TYPES), n)
                    position = rng.integers(1, 21, n)
                else:
                    content = rng.integers(0, 200, n)
                    media = rng.integers(0, len(MEDIA_TYPES), n)
                    position = None
            boost_bits = labels ^ (rng.random(n) < BOOST_FLIP)
            boost_noise = rng.integers(0, 2, n)
            boost_vals = boost_bits if profile.informative else boost_noise

            labels_list = labels.tolist()
            times_list = times.tolist()
            dwell_list = dwells.tolist()
            boost_list = boost_vals.tolist()
            for i in range(n):
                if source is EventSource.AD_IMPRESSION:
                    attrs: dict[str, object] = {}
                    row = signal_bits[i]
                    for j in range(SIGNAL_ATTR_COUNT):
                        attrs[f"attr_{j + 1:02d}"] = f"v{row[j]:d}"
                    nrow = noise_vals[i]
                    for j in range(NOISE_ATTR_COUNT):
                        attrs[f"attr_{SIGNAL_ATTR_COUNT + j + 1:02d}"] = f"n{nrow[j]:d}"
                elif source is EventSource.ORGANIC_IMPRESSION:
                    attrs = {
                        "content_id": f"c{content[i]:d}",
                        "media_type": MEDIA_TYPES[media[i]],
                        "position": int(position[i]),
                    }
                else:
                    attrs = {
                        "semantic_id": f"s{content[i]:d}",
                        "media_type": MEDIA_TYPES[media[i]],
                    }
                attrs["boost_01"] = f"b{boost_list[i]:d}"
                event = Event(
                    user_id=profile.user_id,
                    source=source,
                    timestamp_ms=times_list[i],
                    dwell_ms=dwell_list[i],
                    attributes=attrs,
                )
                truth = TruthRecord(
                    user_id=profile.user_id,
                    timestamp_ms=times_list[i],
                    source=source.value,
                    label=int(labels_list[i]),
                    regime=schedule[regime_idx[i]][1],
                )
                keyed.append((times_list[i], profile.user_id, seq, event, truth))
                seq += 1

    keyed.sort(key=lambda item: (item[0], item[1], item[2]))
    events = [item[3] for item in keyed]
    truth = [item[4] for item in keyed if item[4] is not None]
    return events, truth


def inject_logging_artifacts(events: Sequence[Event], delay_max_ms: int,
                             outlier_rate: float, seed: int,
                             ) -> tuple[list[Event], list[InjectionRecord]]:
    """Degrade a stream the way a real logging pipeline does.

    Every impression's logged timestamp shifts forward by an independent
    Uniform(0, delay_max_ms) delay, and with probability outlier_rate its
    dwell is replaced by an artifact draw: a few milliseconds or a few
    hours, either side equally likely. Conversions and event order are
    untouched, so output lines align 1:1 with input lines.
    """
    if delay_max_ms < 0:
        raise ConfigError(f"delay_max_ms must be >= 0, got {delay_max_ms}")
    if not 0.0 <= outlier_rate <= 1.0:
        raise ConfigError(f"outlier_rate must be in [0, 1], got {outlier_rate}")

    imp_idx = [i for i, e in enumerate(events) if e.is_impression]
    n = len(imp_idx)
    rng = np.random.default_rng(seed)
    delays = (
        rng.uniform(0.0, delay_max_ms, n).astype(np.int64)
        if delay_max_ms > 0 else np.zeros(n, dtype=np.int64)
    )
    is_outlier = rng.random(n) < outlier_rate
    take_low = rng.random(n) < 0.5
    low_vals = rng.integers(OUTLIER_LOW_MS[0], OUTLIER_LOW_MS[1] + 1, n)
    high_vals = rng.integers(OUTLIER_HIGH_MS[0], OUTLIER_HIGH_MS[1] + 1, n)

    out = list(events)
    log: list[InjectionRecord] = []
    for j, i in enumerate(imp_idx):
        event = events[i]
        delay = int(delays[j])
        kind: str | None = None
        dwell = event.dwell_ms
        if is_outlier[j]:
            kind = "low" if take_low[j] else "high"
            dwell = int(low_vals[j] if take_low[j] else high_vals[j])
        if delay or kind is not None:
            out[i] = replace(event, timestamp_ms=event.timestamp_ms + delay,
                             dwell_ms=dwell)
        log.append(InjectionRecord(
            index=i,
            delay_ms=delay,
            outlier_kind=kind,
            original_timestamp_ms=event.timestamp_ms,
            original_dwell_ms=event.dwell_ms,
        ))
    return out, log


def write_truth(profiles: Iterable[UserProfile], truth: Iterable[TruthRecord],
                fh: TextIO) -> int:
    n = 0
    for profile in sorted(profiles, key=lambda p: p.user_id):
        fh.write(json.dumps(profile.to_record(), separators=(",", ":")))
        fh.write("\n")
        n += 1
    for record in truth:
        fh.write(json.dumps(record.to_record(), separators=(",", ":")))
        fh.write("\n")
        n += 1
    return n


def read_truth(lines: Iterable[str]) -> tuple[list[dict], list[TruthRecord]]:
    """Read a truth sidecar back as (profile records, impression records)."""
    profiles: list[dict] = []
    impressions: list[TruthRecord] = []
    for line in lines:
        if not line.strip():
            continue
        record = json.loads(line)
        kind = record.get("record")
        if kind == "profile":
            profiles.append(record)
        elif kind == "impression":
            impressions.append(TruthRecord(
                user_id=record["user_id"],
                timestamp_ms=int(record["timestamp_ms"]),
                source=record["source"],
                label=int(record["label"]),
                regime=record["regime"],
            ))
        else:
            raise SchemaError(f"unknown truth record kind {kind!r}")
    return profiles, impressions
