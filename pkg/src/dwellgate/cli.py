"""Command-line pipeline: generate -> segment -> gate -> evaluate -> report.

Stages hand off through files (JSONL streams, JSON reports) so each can
be rerun or swapped independently. All paths are resolved against
--workdir. Exit codes: 0 success, 1 bad input (config, schema, missing
files), 2 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import yaml

from .config import RunConfig, load_run_config
from .errors import ConfigError, DwellgateError
from .evaluate import compare_policies, label_events, NEReport
from .events import (
    EventSource,
    IngestCounters,
    denoise_dwell,
    read_events,
    serialize_event,
)
from .gating import CostLedger, GatePolicy, gate_stream
from .segmentation import SegmentTable, epoch_of, run_epoch
from .simulate import (
    derive_seed,
    generate_events,
    inject_logging_artifacts,
    load_population,
    make_population,
    write_truth,
)
from .stats import accumulate_stats, write_stats_snapshot


def _resolve(workdir: str, path: str | None) -> Path | None:
    if path is None:
        return None
    return Path(workdir) / path


def _open_out(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def _load_config(workdir: str, path: str | None) -> RunConfig:
    resolved = _resolve(workdir, path)
    return load_run_config(str(resolved) if resolved else None)


def cmd_generate(args: argparse.Namespace) -> int:
    config = _load_config(args.workdir, args.config)
    if args.regimes:
        regimes_path = _resolve(args.workdir, args.regimes)
        with open(regimes_path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh.read()) or {}
        profiles = load_population(raw, n_users=args.users)
    else:
        profiles = make_population(args.users or 100)

    duration_ms = int(args.duration_h * 3_600_000)
    events, truth = generate_events(
        profiles, duration_ms, args.seed, horizon_ms=config.horizon_s_ms
    )
    injection_log = None
    if args.delay_max_ms > 0 or args.outlier_rate > 0:
        events, injection_log = inject_logging_artifacts(
            events, args.delay_max_ms, args.outlier_rate,
            seed=derive_seed(args.seed, "inject"),
        )

    out_path = _resolve(args.workdir, args.out)
    with _open_out(out_path) as fh:
        for event in events:
            fh.write(serialize_event(event))
            fh.write("\n")
    if args.truth:
        with _open_out(_resolve(args.workdir, args.truth)) as fh:
            write_truth(profiles, truth, fh)
    if args.injection_log:
        with _open_out(_resolve(args.workdir, args.injection_log)) as fh:
            for record in injection_log or []:
                fh.write(json.dumps(record.to_record(), separators=(",", ":")))
                fh.write("\n")
    print(f"generated {len(events)} events for {len(profiles)} users -> {args.out}")
    return 0


def _epoch_slices(events, epoch_ms: int, mode: str):
    """Yield (epoch, events visible to that epoch's calibration)."""
    if not events:
        return
    last_epoch = epoch_of(max(e.timestamp_ms for e in events), epoch_ms)
    for epoch in range(last_epoch + 1):
        hi = (epoch + 1) * epoch_ms
        if mode == "cumulative":
            subset = [e for e in events if e.timestamp_ms < hi]
        else:
            lo = epoch * epoch_ms
            subset = [e for e in events if lo <= e.timestamp_ms < hi]
        yield epoch, subset


def cmd_segment(args: argparse.Namespace) -> int:
    config = _load_config(args.workdir, args.config)
    counters = IngestCounters()
    events = read_events(str(_resolve(args.workdir, args.events)), counters)
    if counters.unknown_fields:
        print(f"warning: ignored {counters.unknown_fields} unknown fields",
              file=sys.stderr)
    clean = denoise_dwell(events, config.denoise_min_dwell_ms,
                          config.denoise_max_dwell_ms)

    table = SegmentTable()
    last_stats = {}
    for epoch, subset in _epoch_slices(clean, config.epoch_ms, config.stats_mode):
        stats = accumulate_stats(subset, horizon_ms=config.horizon_s_ms,
                                 buffer_ms=config.buffer_ms)
        calibration, assignments = run_epoch(
            stats.values(), config.target_active_fraction, epoch,
            n_min=config.n_min, normalization=config.correlation_normalization,
            epsilon_override=config.fixed_epsilon,
        )
        for assignment in assignments:
            table.add(assignment)
        last_stats = stats
        eps = calibration.epsilon
        print(
            f"epoch {epoch}: epsilon={eps if math.isfinite(eps) else 'inf'} "
            f"active={calibration.achieved_active_fraction:.4f} "
            f"(target {calibration.target_active_fraction:.4f}, "
            f"population {calibration.population_size})"
        )

    if args.out_stats:
        with _open_out(_resolve(args.workdir, args.out_stats)) as fh:
            write_stats_snapshot(last_stats, fh)
    with _open_out(_resolve(args.workdir, args.out_segments)) as fh:
        n = table.write(fh)
    print(f"wrote {n} segment assignments -> {args.out_segments}")
    return 0


def _read_segments(workdir: str, path: str) -> SegmentTable:
    with open(_resolve(workdir, path), "r", encoding="utf-8") as fh:
        return SegmentTable.read(fh)


def cmd_gate(args: argparse.Namespace) -> int:
    config = _load_config(args.workdir, args.config)
    events = read_events(str(_resolve(args.workdir, args.events)))
    table = _read_segments(args.workdir, args.segments)
    policy = GatePolicy.from_file(str(_resolve(args.workdir, args.policy)))
    ledger = CostLedger()

    def lookup(user_id: str, t_ms: int):
        return table.lookup(user_id, epoch_of(t_ms, config.epoch_ms))

    n_out = 0
    with _open_out(_resolve(args.workdir, args.out)) as fh:
        for gated in gate_stream(events, lookup, policy, ledger):
            fh.write(gated.to_json_line())
            fh.write("\n")
            n_out += 1
    if args.ledger:
        with _open_out(_resolve(args.workdir, args.ledger)) as fh:
            ledger.write(fh)
    total = ledger.total()
    print(
        f"gated {total.events_in} events -> {n_out} kept; attributes "
        f"{total.attributes_in} -> {total.attributes_out}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args.workdir, args.config)
    events = read_events(str(_resolve(args.workdir, args.events)))
    table = _read_segments(args.workdir, args.segments)

    if args.policy_a:
        policy_a = GatePolicy.from_file(str(_resolve(args.workdir, args.policy_a)))
    else:
        policy_a = GatePolicy.identity()
    policy_b_path = args.policy_b or config.policy_file
    if policy_b_path is None:
        raise ConfigError("evaluate needs --policy-b or policy_file in the config")
    policy_b = GatePolicy.from_file(str(_resolve(args.workdir, policy_b_path)))

    report = compare_policies(events, table, policy_a, policy_b, config)
    with _open_out(_resolve(args.workdir, args.report)) as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    def fmt(v):
        return "n/a" if v is None else f"{v:.6f}"

    print(f"samples: {report.n_samples}  prior: {fmt(report.prior_p)}")
    print(f"ne baseline:  {fmt(report.ne_baseline)}")
    print(f"ne treatment: {fmt(report.ne_treatment)}")
    print(f"ne gain:      {fmt(report.ne_gain)}")
    print(f"attr volume ratio: {fmt(report.attr_volume_ratio)}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    report_path = _resolve(args.workdir, args.report)
    with open(report_path, "r", encoding="utf-8") as fh:
        report = NEReport.from_dict(json.load(fh))
    out_dir = _resolve(args.workdir, args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def fmt(v, width=12):
        return ("n/a" if v is None else f"{v:.6f}").rjust(width)

    print(f"{'arm':<12}{'ne':>12}{'gain':>12}{'attr ratio':>12}{'samples':>10}")
    print(f"{'baseline':<12}{fmt(report.ne_baseline)}{fmt(None)}{fmt(1.0)}"
          f"{report.n_samples:>10}")
    print(f"{'treatment':<12}{fmt(report.ne_treatment)}{fmt(report.ne_gain)}"
          f"{fmt(report.attr_volume_ratio)}{report.n_samples:>10}")
    for seg_name, seg in sorted(report.per_segment.items()):
        print(f"{'  ' + seg_name:<12}{fmt(seg.get('ne_treatment'))}"
              f"{fmt(seg.get('ne_gain'))}{fmt(None)}{seg.get('n', 0):>10}")

    curve_path = out_dir / "ne_convergence.csv"
    with open(curve_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "samples", "ne"])
        for arm, curve in sorted(report.convergence.items()):
            for k, value in curve:
                writer.writerow([arm, int(k), repr(float(value))])
    print(f"wrote {curve_path}")

    if args.events:
        config = _load_config(args.workdir, args.config)
        events = read_events(str(_resolve(args.workdir, args.events)))
        clean = denoise_dwell(events, config.denoise_min_dwell_ms,
                              config.denoise_max_dwell_ms)
        labels = label_events(clean, config.horizon_s_ms, config.buffer_ms)
        by_label: dict[int, list[float]] = {0: [], 1: []}
        for event, label in zip(clean, labels):
            if label is not None and event.source is EventSource.AD_IMPRESSION:
                by_label[label].append(event.log_dwell_s())
        hist_path = out_dir / "dwell_histogram.csv"
        values = by_label[0] + by_label[1]
        with open(hist_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count_label0", "count_label1"])
            if values:
                lo, hi = min(values), max(values)
                span = (hi - lo) or 1.0
                bins = 40
                counts = {0: [0] * bins, 1: [0] * bins}
                for label, vals in by_label.items():
                    for v in vals:
                        b = min(bins - 1, int((v - lo) / span * bins))
                        counts[label][b] += 1
                for b in range(bins):
                    writer.writerow([
                        repr(lo + span * b / bins),
                        repr(lo + span * (b + 1) / bins),
                        counts[0][b],
                        counts[1][b],
                    ])
        print(f"wrote {hist_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dwellgate",
        description="Dwell-time driven user segmentation and feature gating.",
    )
    parser.add_argument("--workdir", default=".", help="base directory for all paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate an event stream")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--duration-h", type=float, default=24.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--regimes", help="population description file (YAML/JSON)")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth sidecar output")
    p.add_argument("--delay-max-ms", type=int, default=0)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--injection-log")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("segment", help="accumulate stats and assign segments")
    p.add_argument("--config")
    p.add_argument("--events", required=True)
    p.add_argument("--out-stats")
    p.add_argument("--out-segments", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gate", help="apply a gate policy to a stream")
    p.add_argument("--config")
    p.add_argument("--events", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ledger")
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("evaluate", help="compare two gate policies by NE")
    p.add_argument("--config")
    p.add_argument("--events", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--policy-a", help="baseline policy (default: identity)")
    p.add_argument("--policy-b", help="treatment policy (default: config policy_file)")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render tables and plot data from a report")
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--events", help="event stream for the dwell histogram")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DwellgateError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failures
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
