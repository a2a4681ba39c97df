"""Segment-conditioned feature gating and cost accounting.

A gate policy says, per (segment, source): which base attributes to
remove, which extended attributes to admit ("boost"), and which sources
to pass through at all. Gating is pure per-event filtering; a cost
ledger tracks event/attribute/byte volume on both sides of the gate so
that serving-cost effects can be read off as volume ratios.

Unknown-segment users always receive the passive policy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Mapping, TextIO

import yaml
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError
from .events import (
    DEFAULT_SCHEMA,
    Event,
    EventSource,
    SourceSchema,
    serialize_event,
)
from .segmentation import DEFAULT_EPOCH_MS, Segment, SegmentTable, epoch_of

# Policies are keyed by the two servable segments; unknown maps to passive.
POLICY_SEGMENTS = (Segment.ACTIVE, Segment.PASSIVE)


def _effective_segment(segment: Segment) -> Segment:
    return Segment.PASSIVE if segment is Segment.UNKNOWN else segment


@dataclass(frozen=True)
class GatePolicy:
    """Validated gating rules.

    removals and boosts map (segment, source) -> attribute names; the
    allowlist maps segment -> sources passed through at all. Removals
    must name base-schema attributes, boosts extended-schema ones, so the
    two can never collide. Sources absent from an explicit allowlist are
    dropped for that segment; segments without an allowlist entry pass
    everything.
    """

    schema: Mapping[EventSource, SourceSchema] = field(
        default_factory=lambda: dict(DEFAULT_SCHEMA)
    )
    removals: Mapping[tuple[Segment, EventSource], frozenset[str]] = field(
        default_factory=dict
    )
    boosts: Mapping[tuple[Segment, EventSource], frozenset[str]] = field(
        default_factory=dict
    )
    source_allowlist: Mapping[Segment, frozenset[EventSource]] = field(
        default_factory=dict
    )

    def __post_init__(self) -> None:
        for (segment, source), names in self.removals.items():
            self._check_key(segment, source, "removals")
            schema = self.schema.get(source)
            unknown = names - set(schema.base if schema else ())
            if unknown:
                raise ConfigError(
                    f"removals for ({segment.value}, {source.value}) name "
                    f"attributes outside the base schema: {sorted(unknown)}"
                )
        for (segment, source), names in self.boosts.items():
            self._check_key(segment, source, "boosts")
            schema = self.schema.get(source)
            unknown = names - set(schema.extended if schema else ())
            if unknown:
                raise ConfigError(
                    f"boosts for ({segment.value}, {source.value}) name "
                    f"attributes outside the extended schema: {sorted(unknown)}"
                )
            overlap = names & self.removals.get((segment, source), frozenset())
            if overlap:
                raise ConfigError(
                    f"attributes both removed and boosted for "
                    f"({segment.value}, {source.value}): {sorted(overlap)}"
                )
        for segment in self.source_allowlist:
            if segment not in POLICY_SEGMENTS:
                raise ConfigError(f"allowlist segment must be active or passive, got {segment}")

    @staticmethod
    def _check_key(segment: Segment, source: EventSource, what: str) -> None:
        if segment not in POLICY_SEGMENTS:
            raise ConfigError(f"{what} segment must be active or passive, got {segment}")
        if not isinstance(source, EventSource):
            raise ConfigError(f"{what} source must be an EventSource, got {source!r}")

    @classmethod
    def identity(cls, schema: Mapping[EventSource, SourceSchema] | None = None) -> "GatePolicy":
        return cls(schema=dict(schema or DEFAULT_SCHEMA))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "GatePolicy":
        if not isinstance(raw, Mapping):
            raise ConfigError(f"policy must be a mapping, got {type(raw).__name__}")
        known = {"schema", "removals", "boosts", "source_allowlist"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")

        schema: dict[EventSource, SourceSchema] = dict(DEFAULT_SCHEMA)
        for source_name, entry in (raw.get("schema") or {}).items():
            source = _parse_source(source_name)
            schema[source] = SourceSchema(
                base=tuple(entry.get("base", ())),
                extended=tuple(entry.get("extended", ())),
            )

        def parse_attr_map(key: str) -> dict[tuple[Segment, EventSource], frozenset[str]]:
            out: dict[tuple[Segment, EventSource], frozenset[str]] = {}
            for segment_name, per_source in (raw.get(key) or {}).items():
                segment = _parse_segment(segment_name)
                if not isinstance(per_source, Mapping):
                    raise ConfigError(f"{key}.{segment_name} must map sources to attribute lists")
                for source_name, names in per_source.items():
                    source = _parse_source(source_name)
                    if isinstance(names, str) or not isinstance(names, Iterable):
                        raise ConfigError(
                            f"{key}.{segment_name}.{source_name} must be a list of names"
                        )
                    out[(segment, source)] = frozenset(str(n) for n in names)
            return out

        allowlist: dict[Segment, frozenset[EventSource]] = {}
        for segment_name, sources in (raw.get("source_allowlist") or {}).items():
            segment = _parse_segment(segment_name)
            if isinstance(sources, str) or not isinstance(sources, Iterable):
                raise ConfigError(f"source_allowlist.{segment_name} must be a list of sources")
            allowlist[segment] = frozenset(_parse_source(s) for s in sources)

        return cls(
            schema=schema,
            removals=parse_attr_map("removals"),
            boosts=parse_attr_map("boosts"),
            source_allowlist=allowlist,
        )

    @classmethod
    def from_file(cls, path: str) -> "GatePolicy":
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            if path.endswith(".json"):
                raw = json.loads(text)
            else:
                raw = yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: cannot parse policy: {exc}") from exc
        if raw is None:
            raw = {}
        try:
            return cls.from_dict(raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def allows(self, segment: Segment, source: EventSource) -> bool:
        allowed = self.source_allowlist.get(_effective_segment(segment))
        return allowed is None or source in allowed

    def removals_for(self, segment: Segment, source: EventSource) -> frozenset[str]:
        return self.removals.get((_effective_segment(segment), source), frozenset())

    def boosts_for(self, segment: Segment, source: EventSource) -> frozenset[str]:
        return self.boosts.get((_effective_segment(segment), source), frozenset())

    def extended_names(self, source: EventSource) -> frozenset[str]:
        schema = self.schema.get(source)
        return frozenset(schema.extended) if schema else frozenset()


@dataclass(frozen=True, slots=True)
class GatedEvent:
    """An event that passed the gate, with the segment that gated it."""

    event: Event
    segment: Segment

    def to_json_line(self) -> str:
        record = json.loads(serialize_event(self.event))
        record["segment"] = self.segment.value
        return json.dumps(record, separators=(",", ":"))


def gate(event: Event, segment: Segment, policy: GatePolicy) -> GatedEvent | None:
    """Apply the policy to one event; None means the event is dropped.

    Kept attributes: everything not removed, except that extended-schema
    attributes pass only when boosted for this (segment, source). Order
    is preserved; attributes never gain values or move across events.
    """
    if not policy.allows(segment, event.source):
        return None
    removals = policy.removals_for(segment, event.source)
    boosts = policy.boosts_for(segment, event.source)
    extended = policy.extended_names(event.source)
    if removals or extended:
        kept = {
            name: value
            for name, value in event.attributes.items()
            if name not in removals and (name not in extended or name in boosts)
        }
        if len(kept) != len(event.attributes):
            event = replace(event, attributes=kept)
    return GatedEvent(event=event, segment=segment)


@dataclass(slots=True)
class GateCounts:
    events_in: int = 0
    events_out: int = 0
    attributes_in: int = 0
    attributes_out: int = 0
    bytes_in: int = 0
    bytes_out: int = 0

    def merge(self, other: "GateCounts") -> None:
        self.events_in += other.events_in
        self.events_out += other.events_out
        self.attributes_in += other.attributes_in
        self.attributes_out += other.attributes_out
        self.bytes_in += other.bytes_in
        self.bytes_out += other.bytes_out

    def to_record(self) -> dict:
        return {
            "events_in": self.events_in,
            "events_out": self.events_out,
            "attributes_in": self.attributes_in,
            "attributes_out": self.attributes_out,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
        }


class CostLedger:
    """Per-(segment, source) gate volume counters; mergeable."""

    def __init__(self) -> None:
        self._counts: dict[tuple[Segment, EventSource], GateCounts] = {}

    def counts_for(self, segment: Segment, source: EventSource) -> GateCounts:
        key = (segment, source)
        counts = self._counts.get(key)
        if counts is None:
            counts = self._counts[key] = GateCounts()
        return counts

    def merge(self, other: "CostLedger") -> "CostLedger":
        for key, counts in other._counts.items():
            self.counts_for(*key).merge(counts)
        return self

    def total(self, source: EventSource | None = None) -> GateCounts:
        total = GateCounts()
        for (_, src), counts in self._counts.items():
            if source is None or src is source:
                total.merge(counts)
        return total

    def sources(self) -> list[EventSource]:
        return sorted({src for (_, src) in self._counts}, key=lambda s: s.value)

    def segments(self) -> list[Segment]:
        return sorted({seg for (seg, _) in self._counts}, key=lambda s: s.value)

    def to_dict(self) -> dict:
        out: dict[str, dict[str, dict]] = {}
        for (segment, source) in sorted(self._counts, key=lambda k: (k[0].value, k[1].value)):
            out.setdefault(segment.value, {})[source.value] = (
                self._counts[(segment, source)].to_record()
            )
        return out

    def write(self, fh: TextIO) -> None:
        json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def account(ledger: CostLedger, before: Event, segment: Segment,
            after: GatedEvent | None) -> CostLedger:
    """Record one gate decision. Bytes are serialized-line lengths."""
    counts = ledger.counts_for(segment, before.source)
    counts.events_in += 1
    counts.attributes_in += len(before.attributes)
    counts.bytes_in += len(serialize_event(before))
    if after is not None:
        counts.events_out += 1
        counts.attributes_out += len(after.event.attributes)
        counts.bytes_out += len(after.to_json_line())
    return ledger


def gate_stream(events: Iterable[Event],
                segment_lookup: Callable[[str, int], Segment],
                policy: GatePolicy,
                ledger: CostLedger | None = None) -> Iterator[GatedEvent]:
    """Gate a stream, yielding surviving events in order."""
    for event in events:
        segment = segment_lookup(event.user_id, event.timestamp_ms)
        gated = gate(event, segment, policy)
        if ledger is not None:
            account(ledger, event, segment, gated)
        if gated is not None:
            yield gated


def expected_reduction(policy: GatePolicy, segment_mix: Mapping[Segment, float],
                       schema: Mapping[EventSource, SourceSchema] | None = None,
                       ) -> dict[EventSource, float]:
    """Analytic attribute-volume reduction per source, for cross-checking
    the ledger. Positive means fewer attributes than the base schema
    would emit; boosts push it negative. Sources with an empty base
    schema report 0. segment_mix must sum to 1 over active/passive
    (unknown counts as passive).
    """
    schema = schema or policy.schema
    mix: dict[Segment, float] = {Segment.ACTIVE: 0.0, Segment.PASSIVE: 0.0}
    for segment, weight in segment_mix.items():
        mix[_effective_segment(segment)] += weight
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"segment_mix must sum to 1, got {total}")

    out: dict[EventSource, float] = {}
    for source, source_schema in schema.items():
        base_count = len(source_schema.base)
        if base_count == 0:
            out[source] = 0.0
            continue
        reduction = 0.0
        for segment, weight in mix.items():
            if weight == 0.0:
                continue
            if not policy.allows(segment, source):
                reduction += weight
                continue
            removed = len(policy.removals_for(segment, source))
            boosted = len(policy.boosts_for(segment, source))
            reduction += weight * (removed - boosted) / base_count
        out[source] = reduction
    return out


class FeatureGate(BaseEstimator, TransformerMixin):
    """Estimator facade: fit() binds a segment table, transform() gates.

    transform returns the surviving GatedEvents and leaves the run's
    CostLedger on ledger_.
    """

    def __init__(self, policy: GatePolicy | None = None,
                 epoch_ms: int = DEFAULT_EPOCH_MS) -> None:
        self.policy = policy
        self.epoch_ms = epoch_ms

    def fit(self, X: SegmentTable | Iterable, y=None) -> "FeatureGate":
        if isinstance(X, SegmentTable):
            self.table_ = X
        else:
            self.table_ = SegmentTable(X)
        return self

    def transform(self, X: Iterable[Event]) -> list[GatedEvent]:
        if not hasattr(self, "table_"):
            raise ConfigError("FeatureGate.transform called before fit")
        policy = self.policy or GatePolicy.identity()
        self.ledger_ = CostLedger()

        def lookup(user_id: str, t_ms: int) -> Segment:
            return self.table_.lookup(user_id, epoch_of(t_ms, self.epoch_ms))

        return list(gate_stream(X, lookup, policy, self.ledger_))


def _parse_source(name: object) -> EventSource:
    try:
        return EventSource(name)
    except ValueError:
        raise ConfigError(f"unknown event source {name!r}") from None


def _parse_segment(name: object) -> Segment:
    try:
        segment = Segment(name)
    except ValueError:
        raise ConfigError(f"unknown segment {name!r}") from None
    if segment not in POLICY_SEGMENTS:
        raise ConfigError(f"policies may only target active/passive, got {segment.value}")
    return segment
