"""Offline evaluation: normalized entropy under progressive validation.

The probe model is a one-pass logistic regression over hashed attribute
features. Each labeled impression is predicted first and trained on
second, so the prediction sequence is an honest out-of-sample estimate
despite the single pass. Quality is reported as normalized entropy: the
average log loss divided by the entropy of the label prior, so 1.0 means
"knows nothing beyond the prior" and lower is better. Policy comparisons
train one model per gated arm on identical events and report the gain
(baseline minus treatment) averaged over seeded replicas, alongside
attribute-volume ratios from the gate ledgers as a serving-cost proxy.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError
from .events import Event, build_timelines, denoise_dwell
from .gating import CostLedger, GatedEvent, GatePolicy, account, gate
from .segmentation import Segment, SegmentTable, epoch_of
from .stats import label_impression

PREDICTION_CLIP = 1e-6
DEFAULT_LEARNING_RATE = 0.02
DEFAULT_HASH_DIM = 262_144
CONVERGENCE_POINTS = 120


def normalized_entropy(labels: Sequence[int] | np.ndarray,
                       predictions: Sequence[float] | np.ndarray,
                       clip: float = PREDICTION_CLIP) -> float | None:
    """Average log loss over the entropy of the empirical label prior.

    Predictions are clipped into [clip, 1 - clip] before the loss.
    Exactly 1.0 when every prediction equals the prior. None when the
    labels are all one class (the prior entropy is zero).
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(predictions, dtype=np.float64), clip, 1.0 - clip)
    if y.size == 0 or y.size != p.size:
        raise ConfigError(f"labels and predictions must align, got {y.size} vs {p.size}")
    prior = float(y.mean())
    if prior <= 0.0 or prior >= 1.0:
        return None
    ce = -float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    h = -(prior * math.log(prior) + (1.0 - prior) * math.log(1.0 - prior))
    return ce / h


def running_ne(labels: np.ndarray, predictions: np.ndarray,
               points: int = CONVERGENCE_POINTS,
               clip: float = PREDICTION_CLIP) -> list[tuple[int, float]]:
    """Normalized entropy over growing prefixes, for convergence curves.

    Returns (sample_count, ne) pairs at about ``points`` checkpoints;
    prefixes whose labels are still one-class are skipped.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(predictions, dtype=np.float64), clip, 1.0 - clip)
    n = y.size
    if n == 0:
        return []
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    cum_loss = np.cumsum(loss)
    cum_pos = np.cumsum(y)
    step = max(1, n // points)
    curve: list[tuple[int, float]] = []
    for k in range(step, n + 1, step):
        prior = cum_pos[k - 1] / k
        if prior <= 0.0 or prior >= 1.0:
            continue
        h = -(prior * math.log(prior) + (1.0 - prior) * math.log(1.0 - prior))
        curve.append((k, float(cum_loss[k - 1] / k / h)))
    if not curve or curve[-1][0] != n:
        prior = cum_pos[-1] / n
        if 0.0 < prior < 1.0:
            h = -(prior * math.log(prior) + (1.0 - prior) * math.log(1.0 - prior))
            curve.append((n, float(cum_loss[-1] / n / h)))
    return curve


def featurize(event: Event) -> list[str]:
    """Hashable feature tokens for one impression: source plus attributes."""
    tokens = ["src=" + event.source.value]
    for name, value in event.attributes.items():
        tokens.append(f"{name}={value}")
    return tokens


class OnlineLogisticModel(BaseEstimator):
    """One-pass logistic regression over hashed feature tokens.

    Weights live in a fixed-size table indexed by a seeded CRC32 of each
    token, plus an explicit intercept. predict() before update() per
    example gives progressive validation. Deterministic given
    (hash_seed, stream order); there is no other randomness.
    """

    def __init__(self, learning_rate: float = DEFAULT_LEARNING_RATE,
                 hash_dim: int = DEFAULT_HASH_DIM, hash_seed: int = 0) -> None:
        self.learning_rate = learning_rate
        self.hash_dim = hash_dim
        self.hash_seed = hash_seed

    def _setup(self) -> None:
        if self.hash_dim < 2:
            raise ConfigError(f"hash_dim must be >= 2, got {self.hash_dim}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        self.weights_: list[float] = [0.0] * self.hash_dim
        self.bias_ = 0.0
        self._index_cache: dict[str, int] = {}
        self._prefix = f"{self.hash_seed}:".encode("utf-8")

    def _indices(self, tokens: Iterable[str]) -> list[int]:
        cache = self._index_cache
        dim = self.hash_dim
        prefix = self._prefix
        out = []
        for token in tokens:
            idx = cache.get(token)
            if idx is None:
                idx = zlib.crc32(prefix + token.encode("utf-8")) % dim
                cache[token] = idx
            out.append(idx)
        return out

    def predict_one(self, indices: Sequence[int]) -> float:
        z = self.bias_
        weights = self.weights_
        for i in indices:
            z += weights[i]
        # Bound the logit so exp() stays finite.
        z = min(35.0, max(-35.0, z))
        return 1.0 / (1.0 + math.exp(-z))

    def update_one(self, indices: Sequence[int], p: float, y: int) -> None:
        step = self.learning_rate * (p - y)
        self.bias_ -= step
        weights = self.weights_
        for i in indices:
            weights[i] -= step

    def progressive_run(self, examples: Iterable[tuple[Sequence[str], int]],
                        ) -> np.ndarray:
        """Predict-then-update over (tokens, label) pairs; returns predictions."""
        self._setup()
        preds: list[float] = []
        for tokens, label in examples:
            indices = self._indices(tokens)
            p = self.predict_one(indices)
            preds.append(p)
            self.update_one(indices, p, label)
        return np.asarray(preds, dtype=np.float64)


def train_predict_online(stream: Iterable[tuple[GatedEvent, int]],
                         learning_rate: float = DEFAULT_LEARNING_RATE,
                         hash_dim: int = DEFAULT_HASH_DIM,
                         hash_seed: int = 0) -> np.ndarray:
    """Progressive-validation predictions for a gated, labeled stream."""
    model = OnlineLogisticModel(learning_rate, hash_dim, hash_seed)
    return model.progressive_run(
        (featurize(g.event), label) for g, label in stream
    )


def label_events(events: Sequence[Event], horizon_ms: int,
                 buffer_ms: int = 0) -> list[int | None]:
    """Window label per event, aligned with the input; None for conversions."""
    timelines = build_timelines(events)
    conversions = {uid: tl.conversion_times for uid, tl in timelines.items()}
    labels: list[int | None] = []
    for event in events:
        if event.is_impression:
            labels.append(label_impression(
                event.timestamp_ms, conversions[event.user_id], horizon_ms, buffer_ms
            ))
        else:
            labels.append(None)
    return labels


def _ne_or_none(labels: np.ndarray, preds: np.ndarray, clip: float) -> float | None:
    if labels.size == 0:
        return None
    return normalized_entropy(labels, preds, clip)


@dataclass
class ArmResult:
    """Everything measured for one gated arm."""

    name: str
    ne: float | None
    ne_per_replica: list[float | None]
    n_samples: int
    prior_p: float | None
    per_segment: dict[str, dict]
    ledger: CostLedger
    convergence: list[tuple[int, float]]


@dataclass
class NEReport:
    """Outcome of one two-arm policy comparison."""

    ne_baseline: float | None
    ne_treatment: float | None
    ne_gain: float | None
    n_samples: int
    prior_p: float | None
    attr_volume_ratio: float | None
    per_segment: dict[str, dict] = field(default_factory=dict)
    per_source_attr_ratio: dict[str, float | None] = field(default_factory=dict)
    replicas: int = 1
    seeds: list[int] = field(default_factory=list)
    learning_rate: float = DEFAULT_LEARNING_RATE
    hash_dim: int = DEFAULT_HASH_DIM
    prediction_clip: float = PREDICTION_CLIP
    per_replica: dict[str, list[float | None]] = field(default_factory=dict)
    convergence: dict[str, list[list[float]]] = field(default_factory=dict)
    ledgers: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ne_baseline": self.ne_baseline,
            "ne_treatment": self.ne_treatment,
            "ne_gain": self.ne_gain,
            "n_samples": self.n_samples,
            "prior_p": self.prior_p,
            "attr_volume_ratio": self.attr_volume_ratio,
            "per_segment": self.per_segment,
            "per_source_attr_ratio": self.per_source_attr_ratio,
            "replicas": self.replicas,
            "seeds": list(self.seeds),
            "learning_rate": self.learning_rate,
            "hash_dim": self.hash_dim,
            "prediction_clip": self.prediction_clip,
            "per_replica": self.per_replica,
            "convergence": self.convergence,
            "ledgers": self.ledgers,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "NEReport":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _run_arm(name: str, events: Sequence[Event], labels: Sequence[int | None],
             segments: Sequence[Segment], policy: GatePolicy,
             seeds: Sequence[int], learning_rate: float, hash_dim: int,
             clip: float) -> ArmResult:
    ledger = CostLedger()
    token_cache: dict[str, str] = {}
    examples: list[tuple[list[str], int, str]] = []
    for event, label, segment in zip(events, labels, segments):
        gated = gate(event, segment, policy)
        account(ledger, event, segment, gated)
        if gated is None or label is None:
            continue
        tokens = [token_cache.setdefault(t, t) for t in featurize(gated.event)]
        seg_name = (Segment.PASSIVE if segment is Segment.UNKNOWN else segment).value
        examples.append((tokens, label, seg_name))

    y = np.asarray([ex[1] for ex in examples], dtype=np.float64)
    seg_names = np.asarray([ex[2] for ex in examples])
    ne_per_replica: list[float | None] = []
    per_segment_runs: dict[str, list[float | None]] = {}
    curves: list[list[tuple[int, float]]] = []
    for seed in seeds:
        model = OnlineLogisticModel(learning_rate, hash_dim, hash_seed=seed)
        preds = model.progressive_run((tokens, label) for tokens, label, _ in examples)
        ne_per_replica.append(_ne_or_none(y, preds, clip))
        curves.append(running_ne(y, preds, clip=clip))
        for seg_value in (Segment.ACTIVE.value, Segment.PASSIVE.value):
            mask = seg_names == seg_value
            per_segment_runs.setdefault(seg_value, []).append(
                _ne_or_none(y[mask], preds[mask], clip)
            )

    defined = [v for v in ne_per_replica if v is not None]
    ne = sum(defined) / len(defined) if defined else None
    per_segment: dict[str, dict] = {}
    for seg_value, values in per_segment_runs.items():
        seg_defined = [v for v in values if v is not None]
        mask = seg_names == seg_value
        per_segment[seg_value] = {
            "ne": sum(seg_defined) / len(seg_defined) if seg_defined else None,
            "n": int(mask.sum()),
            "prior_p": float(y[mask].mean()) if mask.any() else None,
        }

    # Average convergence curves across replicas at shared checkpoints.
    convergence: list[tuple[int, float]] = []
    if curves and all(curves):
        shared = min(len(c) for c in curves)
        for i in range(shared):
            k = curves[0][i][0]
            vals = [c[i][1] for c in curves]
            convergence.append((k, sum(vals) / len(vals)))

    return ArmResult(
        name=name,
        ne=ne,
        ne_per_replica=ne_per_replica,
        n_samples=len(examples),
        prior_p=float(y.mean()) if y.size else None,
        per_segment=per_segment,
        ledger=ledger,
        convergence=convergence,
    )


def compare_policies(events: Sequence[Event], segments: SegmentTable,
                     policy_a: GatePolicy, policy_b: GatePolicy,
                     config) -> NEReport:
    """Train one probe model per arm on the same events and segments.

    ``config`` is a RunConfig (or anything with the same fields). Events
    are denoised, labeled with the configured window, and segment-tagged
    once; only the gate differs between arms. Gain is baseline minus
    treatment, positive when the treatment predicts better.
    """
    seeds = list(config.seeds[: config.replicas])
    if len(seeds) < config.replicas:
        raise ConfigError(
            f"need {config.replicas} seeds, config provides {len(config.seeds)}"
        )
    clean = denoise_dwell(events, config.denoise_min_dwell_ms,
                          config.denoise_max_dwell_ms)
    labels = label_events(clean, config.horizon_s_ms, config.buffer_ms)
    seg_per_event = [
        segments.lookup(e.user_id, epoch_of(e.timestamp_ms, config.epoch_ms))
        for e in clean
    ]

    arm_a = _run_arm("baseline", clean, labels, seg_per_event, policy_a,
                     seeds, config.learning_rate, config.hash_dim, PREDICTION_CLIP)
    arm_b = _run_arm("treatment", clean, labels, seg_per_event, policy_b,
                     seeds, config.learning_rate, config.hash_dim, PREDICTION_CLIP)

    gain = None
    if arm_a.ne is not None and arm_b.ne is not None:
        gain = arm_a.ne - arm_b.ne

    attrs_a = arm_a.ledger.total().attributes_out
    attrs_b = arm_b.ledger.total().attributes_out
    ratio = attrs_b / attrs_a if attrs_a else None

    per_source_ratio: dict[str, float | None] = {}
    for source in arm_a.ledger.sources():
        a = arm_a.ledger.total(source).attributes_out
        b = arm_b.ledger.total(source).attributes_out
        per_source_ratio[source.value] = (b / a) if a else None

    per_segment: dict[str, dict] = {}
    for seg_value in (Segment.ACTIVE.value, Segment.PASSIVE.value):
        a = arm_a.per_segment.get(seg_value, {})
        b = arm_b.per_segment.get(seg_value, {})
        seg_gain = None
        if a.get("ne") is not None and b.get("ne") is not None:
            seg_gain = a["ne"] - b["ne"]
        per_segment[seg_value] = {
            "ne_baseline": a.get("ne"),
            "ne_treatment": b.get("ne"),
            "ne_gain": seg_gain,
            "n": a.get("n", 0),
            "prior_p": a.get("prior_p"),
        }

    return NEReport(
        ne_baseline=arm_a.ne,
        ne_treatment=arm_b.ne,
        ne_gain=gain,
        n_samples=arm_a.n_samples,
        prior_p=arm_a.prior_p,
        attr_volume_ratio=ratio,
        per_segment=per_segment,
        per_source_attr_ratio=per_source_ratio,
        replicas=config.replicas,
        seeds=seeds,
        learning_rate=config.learning_rate,
        hash_dim=config.hash_dim,
        prediction_clip=PREDICTION_CLIP,
        per_replica={
            "baseline": arm_a.ne_per_replica,
            "treatment": arm_b.ne_per_replica,
        },
        convergence={
            "baseline": [[k, v] for k, v in arm_a.convergence],
            "treatment": [[k, v] for k, v in arm_b.convergence],
        },
        ledgers={
            "baseline": arm_a.ledger.to_dict(),
            "treatment": arm_b.ledger.to_dict(),
        },
    )
