"""Dwell-time driven user segmentation and dynamic feature gating.

The pipeline: ingest impression/conversion event streams, label each
impression by whether a conversion follows within a horizon, accumulate
per-user log-dwell statistics conditioned on that label, segment users
by how strongly their dwell correlates with converting, and gate event
attributes per segment to trade prediction quality against logging and
serving volume. A simulator with known ground truth and a normalized
entropy evaluator close the loop.
"""

from .config import RunConfig, load_run_config
from .errors import ConfigError, DwellgateError, ParseError, RangeError, SchemaError
from .evaluate import (
    NEReport,
    OnlineLogisticModel,
    compare_policies,
    normalized_entropy,
    train_predict_online,
)
from .events import (
    DEFAULT_SCHEMA,
    Event,
    EventSource,
    IngestCounters,
    SourceSchema,
    UserTimeline,
    adjust_label_window,
    build_timelines,
    denoise_dwell,
    parse_event,
    read_events,
    serialize_event,
    write_events,
)
from .gating import (
    CostLedger,
    FeatureGate,
    GatedEvent,
    GatePolicy,
    account,
    expected_reduction,
    gate,
    gate_stream,
)
from .segmentation import (
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
from .simulate import (
    InjectionRecord,
    TruthRecord,
    UserProfile,
    generate_events,
    inject_logging_artifacts,
    make_population,
)
from .stats import (
    DwellModel,
    UserStats,
    accumulate_stats,
    correlation,
    fit_model,
    label_impression,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CostLedger",
    "DEFAULT_SCHEMA",
    "DwellgateError",
    "DwellModel",
    "EpochCalibration",
    "Event",
    "EventSource",
    "FeatureGate",
    "GatedEvent",
    "GatePolicy",
    "IngestCounters",
    "InjectionRecord",
    "NEReport",
    "OnlineLogisticModel",
    "ParseError",
    "RangeError",
    "RunConfig",
    "SchemaError",
    "Segment",
    "SegmentAssignment",
    "SegmentTable",
    "SourceSchema",
    "ThresholdSegmenter",
    "TruthRecord",
    "UserProfile",
    "UserStats",
    "UserTimeline",
    "account",
    "accumulate_stats",
    "adjust_label_window",
    "assign_segment",
    "build_timelines",
    "calibrate_epsilon",
    "compare_policies",
    "correlation",
    "denoise_dwell",
    "epoch_of",
    "expected_reduction",
    "fit_model",
    "gate",
    "gate_stream",
    "generate_events",
    "inject_logging_artifacts",
    "label_impression",
    "load_run_config",
    "make_population",
    "normalized_entropy",
    "parse_event",
    "read_events",
    "run_epoch",
    "serialize_event",
    "train_predict_online",
    "write_events",
]
