"""Event model: the wire format every other module consumes.

Events arrive as JSONL, one object per line, in no guaranteed order. An
event is either an impression (it has a dwell time) or a conversion (it
has a conversion kind). Attributes are a flat map of scalar values whose
names depend on the source; the attribute schema is configurable per
source and split into a ``base`` set (always logged) and an ``extended``
set (logged but withheld downstream unless a gate policy admits it).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, TextIO

from .errors import ConfigError, ParseError, RangeError, SchemaError


class EventSource(str, Enum):
    ORGANIC_IMPRESSION = "organic_impression"
    AD_IMPRESSION = "ad_impression"
    NEW_PAGE_IMPRESSION = "new_page_impression"
    CONVERSION = "conversion"


IMPRESSION_SOURCES = (
    EventSource.ORGANIC_IMPRESSION,
    EventSource.AD_IMPRESSION,
    EventSource.NEW_PAGE_IMPRESSION,
)

AttrValue = str | int | float


@dataclass(frozen=True, slots=True)
class Event:
    """One logged event.

    dwell_ms is present exactly when the source is an impression;
    conversion_kind exactly when the source is a conversion.
    """

    user_id: str
    source: EventSource
    timestamp_ms: int
    dwell_ms: int | None = None
    attributes: dict[str, AttrValue] = field(default_factory=dict)
    conversion_kind: str | None = None

    @property
    def is_impression(self) -> bool:
        return self.source is not EventSource.CONVERSION

    def log_dwell_s(self) -> float:
        """Natural log of the dwell time in seconds."""
        if self.dwell_ms is None or self.dwell_ms <= 0:
            raise RangeError(f"dwell_ms must be positive, got {self.dwell_ms!r}")
        return math.log(self.dwell_ms / 1000.0)


@dataclass(frozen=True)
class SourceSchema:
    """Attribute names a source carries: base set plus extended extras."""

    base: tuple[str, ...]
    extended: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        overlap = set(self.base) & set(self.extended)
        if overlap:
            raise ConfigError(f"attributes in both base and extended: {sorted(overlap)}")

    @property
    def all_names(self) -> frozenset[str]:
        return frozenset(self.base) | frozenset(self.extended)


# Default simulated schema. Real deployments remap names via config.
DEFAULT_SCHEMA: dict[EventSource, SourceSchema] = {
    EventSource.AD_IMPRESSION: SourceSchema(
        base=tuple(f"attr_{i:02d}" for i in range(1, 12)),
        extended=("boost_01",),
    ),
    EventSource.ORGANIC_IMPRESSION: SourceSchema(
        base=("content_id", "media_type", "position"),
        extended=("boost_01",),
    ),
    EventSource.NEW_PAGE_IMPRESSION: SourceSchema(
        base=("semantic_id", "media_type"),
        extended=("boost_01",),
    ),
    EventSource.CONVERSION: SourceSchema(base=()),
}

# Default drop bounds: anything faster than a glance or longer than 30
# minutes is treated as a logging artifact, not a view.
DENOISE_MIN_DWELL_MS = 250
DENOISE_MAX_DWELL_MS = 1_800_000

_KNOWN_FIELDS = frozenset(
    {"user_id", "source", "timestamp_ms", "dwell_ms", "attributes", "conversion_kind"}
)


@dataclass
class IngestCounters:
    """Tallies kept while reading a stream; unknown fields are not fatal."""

    lines: int = 0
    events: int = 0
    unknown_fields: int = 0


def parse_event(line: str, counters: IngestCounters | None = None) -> Event:
    """Parse one JSONL line into an Event.

    Raises ParseError for undecodable lines, SchemaError for structural
    violations, RangeError for out-of-range values. Unknown top-level
    fields are ignored (counted on ``counters`` when given) so that newer
    producers do not break older consumers.
    """
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"event must be a JSON object, got {type(raw).__name__}")

    unknown = set(raw) - _KNOWN_FIELDS
    if unknown and counters is not None:
        counters.unknown_fields += len(unknown)

    user_id = raw.get("user_id")
    if not isinstance(user_id, str) or not user_id:
        raise SchemaError(f"user_id must be a non-empty string, got {user_id!r}")

    source_raw = raw.get("source")
    try:
        source = EventSource(source_raw)
    except ValueError:
        raise SchemaError(f"unknown source {source_raw!r}") from None

    timestamp_ms = raw.get("timestamp_ms")
    if not isinstance(timestamp_ms, int) or isinstance(timestamp_ms, bool):
        raise SchemaError(f"timestamp_ms must be an integer, got {timestamp_ms!r}")
    if timestamp_ms < 0:
        raise RangeError(f"timestamp_ms must be >= 0, got {timestamp_ms}")

    dwell_ms = raw.get("dwell_ms")
    conversion_kind = raw.get("conversion_kind")
    if source is EventSource.CONVERSION:
        if dwell_ms is not None:
            raise SchemaError("conversion events must not carry dwell_ms")
        if not isinstance(conversion_kind, str) or not conversion_kind:
            raise SchemaError("conversion events require a conversion_kind string")
    else:
        if conversion_kind is not None:
            raise SchemaError("impression events must not carry conversion_kind")
        if dwell_ms is None:
            raise SchemaError(f"{source.value} events require dwell_ms")
        if not isinstance(dwell_ms, int) or isinstance(dwell_ms, bool):
            raise SchemaError(f"dwell_ms must be an integer, got {dwell_ms!r}")
        if dwell_ms < 0:
            raise RangeError(f"dwell_ms must be >= 0, got {dwell_ms}")

    attributes = raw.get("attributes", {})
    if not isinstance(attributes, dict):
        raise SchemaError(f"attributes must be an object, got {type(attributes).__name__}")
    for name, value in attributes.items():
        if not isinstance(name, str):
            raise SchemaError(f"attribute names must be strings, got {name!r}")
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise SchemaError(f"attribute {name!r} must be a scalar, got {value!r}")

    if counters is not None:
        counters.events += 1
    return Event(
        user_id=user_id,
        source=source,
        timestamp_ms=timestamp_ms,
        dwell_ms=dwell_ms,
        attributes=dict(attributes),
        conversion_kind=conversion_kind,
    )


def serialize_event(event: Event) -> str:
    """Canonical one-line JSON form; parse(serialize(e)) == e."""
    record: dict[str, object] = {
        "user_id": event.user_id,
        "source": event.source.value,
        "timestamp_ms": event.timestamp_ms,
    }
    if event.dwell_ms is not None:
        record["dwell_ms"] = event.dwell_ms
    if event.conversion_kind is not None:
        record["conversion_kind"] = event.conversion_kind
    if event.attributes or event.is_impression:
        record["attributes"] = event.attributes
    return json.dumps(record, separators=(",", ":"))


def iter_events(lines: Iterable[str], counters: IngestCounters | None = None,
                source_name: str = "<stream>") -> Iterator[Event]:
    """Parse a line stream, prefixing errors with source name and line number."""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if counters is not None:
            counters.lines += 1
        try:
            yield parse_event(line, counters)
        except (ParseError, SchemaError, RangeError) as exc:
            raise type(exc)(f"{source_name}:{lineno}: {exc}") from exc


def read_events(path: str, counters: IngestCounters | None = None) -> list[Event]:
    with open(path, "r", encoding="utf-8") as fh:
        return list(iter_events(fh, counters, source_name=path))


def write_events(events: Iterable[Event], fh: TextIO) -> int:
    n = 0
    for event in events:
        fh.write(serialize_event(event))
        fh.write("\n")
        n += 1
    return n


def denoise_dwell(events: Iterable[Event],
                  min_dwell_ms: int = DENOISE_MIN_DWELL_MS,
                  max_dwell_ms: int = DENOISE_MAX_DWELL_MS) -> list[Event]:
    """Drop impressions whose dwell falls outside [min_dwell_ms, max_dwell_ms].

    Conversions pass through untouched; relative order is preserved.
    Dropping (rather than clamping) keeps artifact dwell values out of the
    dwell statistics entirely. Idempotent.
    """
    if min_dwell_ms >= max_dwell_ms:
        raise ConfigError(
            f"denoise bounds must satisfy min < max, got [{min_dwell_ms}, {max_dwell_ms}]"
        )
    kept = []
    for event in events:
        if event.is_impression:
            assert event.dwell_ms is not None
            if not (min_dwell_ms <= event.dwell_ms <= max_dwell_ms):
                continue
        kept.append(event)
    return kept


def adjust_label_window(t_ms: int, horizon_ms: int, buffer_ms: int) -> tuple[int, int]:
    """Conversion-credit window for an impression logged at t_ms.

    The window is [t_ms - buffer_ms, t_ms + horizon_ms]. The buffer widens
    the window backwards to absorb logging delay: an impression can be
    logged up to a minute after the conversion it actually preceded, so
    without the buffer its conversion would fall before the window. The
    lower bound may be negative; callers clamp if they need wall time.
    """
    if horizon_ms <= 0:
        raise ConfigError(f"horizon_ms must be positive, got {horizon_ms}")
    if buffer_ms < 0:
        raise ConfigError(f"buffer_ms must be >= 0, got {buffer_ms}")
    return (t_ms - buffer_ms, t_ms + horizon_ms)


@dataclass
class UserTimeline:
    """One user's events split into sorted impressions and conversion times."""

    user_id: str
    impressions: list[Event] = field(default_factory=list)
    conversion_times: list[int] = field(default_factory=list)

    def sort(self) -> None:
        self.impressions.sort(key=lambda e: e.timestamp_ms)
        self.conversion_times.sort()


def build_timelines(events: Iterable[Event]) -> dict[str, UserTimeline]:
    """Group events per user; output is sorted regardless of input order."""
    timelines: dict[str, UserTimeline] = {}
    for event in events:
        timeline = timelines.get(event.user_id)
        if timeline is None:
            timeline = timelines[event.user_id] = UserTimeline(event.user_id)
        if event.source is EventSource.CONVERSION:
            timeline.conversion_times.append(event.timestamp_ms)
        else:
            timeline.impressions.append(event)
    for timeline in timelines.values():
        timeline.sort()
    return timelines
