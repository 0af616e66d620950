"""Command-line front end: single runs, threshold sweeps, the time-triggered
baseline, and baseline-versus-candidate comparison, all emitting versioned,
machine-readable outputs with the fully resolved configuration embedded."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import sim
from .comms import CONTROL_AWARE, TIME_TRIGGERED, TriggerPolicy
from .config import ConfigError, load_config
from .sim import METRICS_SCHEMA, BatchResult, ScenarioConfig

DEFAULT_THRESHOLDS = (200.0, 300.0, 400.0, 500.0, 600.0, 700.0)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2

SWEEP_HEADER = ("threshold,mean_comm_rate,comm_rate_stderr,"
                "mean_spacing_error,spacing_error_stderr,"
                "mean_speed_difference,speed_difference_stderr,"
                "mean_acceleration_difference,acceleration_difference_stderr,"
                "collisions,runs")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caccsim",
        description="CACC platoon simulator with control-aware "
                    "event-triggered, model-based communication.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON scenario config (defaults built in)")
        p.add_argument("--out", type=Path, default=Path("."),
                       help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the base seed")
        p.add_argument("--per", type=float, default=None,
                       help="override the packet error rate")
        p.add_argument("--mode", choices=[TIME_TRIGGERED, CONTROL_AWARE],
                       default=None, help="override the trigger mode")
        p.add_argument("--threshold", type=float, default=None,
                       help="override the control-aware threshold")
        p.add_argument("--allow-violations", action="store_true",
                       help="exit 0 even on collision or timing violations")

    run_p = sub.add_parser("run", help="one scenario; trace CSV + metrics")
    common(run_p)

    sweep_p = sub.add_parser("sweep",
                             help="threshold sweep with batched runs")
    common(sweep_p)
    sweep_p.add_argument("--thresholds", type=str, default=None,
                         help="comma-separated threshold list")
    sweep_p.add_argument("--runs", type=int, default=70,
                         help="runs per threshold stage")

    base_p = sub.add_parser("baseline",
                            help="time-triggered baseline at PER 0 and 0.6")
    common(base_p)
    base_p.add_argument("--runs", type=int, default=70)

    cmp_p = sub.add_parser("compare",
                           help="reduction report: candidate vs baseline")
    cmp_p.add_argument("--baseline", type=Path, required=True,
                       help="metrics JSON of the baseline run")
    cmp_p.add_argument("--candidate", type=Path, required=True,
                       help="metrics JSON of the candidate run")
    cmp_p.add_argument("--out", type=Path, default=Path("."))
    return parser


def _load(args) -> ScenarioConfig:
    overrides = {"seed": args.seed, "per": args.per, "mode": args.mode,
                 "threshold": args.threshold}
    return load_config(args.config, overrides)


def _violations(metrics: sim.Metrics, config: ScenarioConfig) -> list[str]:
    problems = []
    if metrics.collision:
        problems.append("collision: a follower gap reached zero")
    min_steps = metrics.min_inter_event_steps
    if min_steps is not None:
        miet_steps = round(config.policy.min_inter_event / config.step)
        if min_steps < miet_steps:
            problems.append("timing: an inter-event interval fell below "
                            "the minimum inter-event time")
    max_steps = metrics.max_inter_event_steps
    if max_steps is not None:
        limit = round(config.policy.max_inter_event / config.step) + 1
        if max_steps > limit:
            problems.append("timing: an inter-event interval exceeded the "
                            "maximum inter-event time by more than one slot")
    return problems


def _write_metrics(path: Path, config: ScenarioConfig, payload: dict) -> None:
    doc = {"schema": METRICS_SCHEMA, "config": sim.config_to_dict(config)}
    doc.update(payload)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_run(args) -> int:
    config = _load(args)
    args.out.mkdir(parents=True, exist_ok=True)
    metrics, trace = sim.run_scenario(config)
    trace_path = args.out / "trace.csv"
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        trace.to_csv(fh)
    _write_metrics(args.out / "metrics.json", config,
                   {"metrics": metrics.to_dict()})
    problems = _violations(metrics, config)
    for problem in problems:
        print(f"warning: {problem}", file=sys.stderr)
    print(f"wrote {trace_path} and metrics.json "
          f"(comm rate {metrics.mean_comm_rate:.3f} Hz, spacing error "
          f"{metrics.mean_spacing_error:.3f} m)")
    if problems and not args.allow_violations:
        return EXIT_VIOLATION
    return EXIT_OK


def _batch_row(threshold: float, batch: BatchResult) -> str:
    cells = [f"{threshold:g}"]
    for name in ("mean_comm_rate", "mean_spacing_error",
                 "mean_speed_difference", "mean_acceleration_difference"):
        cells.append(repr(batch.mean(name)))
        cells.append(repr(batch.stderr(name)))
    cells.append(str(sum(int(m.collision) for m in batch.runs)))
    cells.append(str(len(batch.runs)))
    return ",".join(cells)


def cmd_sweep(args) -> int:
    config = _load(args)
    if args.thresholds is None:
        thresholds = list(DEFAULT_THRESHOLDS)
    else:
        try:
            thresholds = [float(x) for x in args.thresholds.split(",") if x]
        except ValueError:
            print("error: --thresholds must be a comma-separated number "
                  "list", file=sys.stderr)
            return EXIT_CONFIG
    if not thresholds:
        print("error: empty threshold list", file=sys.stderr)
        return EXIT_CONFIG
    if args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    results = {}
    any_collision = False
    for threshold in thresholds:
        cfg = dataclasses.replace(
            config, policy=dataclasses.replace(config.policy,
                                               mode=CONTROL_AWARE,
                                               threshold=threshold))
        batch = sim.run_batch(cfg, args.runs)
        rows.append(_batch_row(threshold, batch))
        results[f"{threshold:g}"] = batch.summary()
        any_collision |= batch.any_collision()
    sweep_path = args.out / "sweep.csv"
    sweep_path.write_text(SWEEP_HEADER + "\n" + "\n".join(rows) + "\n",
                          encoding="utf-8")
    _write_metrics(args.out / "sweep.json", config,
                   {"runs_per_stage": args.runs, "stages": results})
    print(f"wrote {sweep_path} ({len(rows)} stages x {args.runs} runs)")
    if any_collision and not args.allow_violations:
        print("warning: collision occurred in at least one run",
              file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_baseline(args) -> int:
    config = _load(args)
    if args.runs < 1:
        print("error: --runs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    policy = dataclasses.replace(config.policy, mode=TIME_TRIGGERED)
    payload = {"runs": args.runs, "baselines": {}}
    any_collision = False
    for per in (0.0, 0.6):
        cfg = dataclasses.replace(config, policy=policy, per=per)
        batch = sim.run_batch(cfg, args.runs)
        payload["baselines"][f"per={per:g}"] = batch.summary()
        any_collision |= batch.any_collision()
    _write_metrics(args.out / "baseline.json", config, payload)
    rate0 = payload["baselines"]["per=0"]["mean_comm_rate"]["mean"]
    print(f"wrote baseline.json (transmit rate at PER 0: {rate0:g} Hz)")
    if any_collision and not args.allow_violations:
        return EXIT_VIOLATION
    return EXIT_OK


def _pull_summary(doc: dict) -> dict:
    # Accept either a single-run metrics file or a batch summary block.
    if "metrics" in doc:
        return {name: {"mean": doc["metrics"][name], "stderr": 0.0}
                for name in ("mean_comm_rate", "mean_spacing_error",
                             "mean_speed_difference",
                             "mean_acceleration_difference")}
    if "baselines" in doc:
        return doc["baselines"]["per=0"]
    raise ValueError("unrecognized metrics document")


def cmd_compare(args) -> int:
    try:
        base = json.loads(args.baseline.read_text(encoding="utf-8"))
        cand = json.loads(args.candidate.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: file not found", file=sys.stderr)
        return EXIT_CONFIG
    try:
        base_s = _pull_summary(base)
        cand_s = _pull_summary(cand)
    except (ValueError, KeyError) as exc:
        print(f"error: malformed metrics document: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    base_rate = base_s["mean_comm_rate"]["mean"]
    cand_rate = cand_s["mean_comm_rate"]["mean"]
    base_speed = base_s["mean_speed_difference"]["mean"]
    cand_speed = cand_s["mean_speed_difference"]["mean"]
    doc = {
        "schema": METRICS_SCHEMA,
        "baseline_comm_rate": base_rate,
        "candidate_comm_rate": cand_rate,
        "comm_rate_reduction_pct": 100.0 * (base_rate - cand_rate)
                                   / base_rate if base_rate else 0.0,
        "baseline_speed_difference": base_speed,
        "candidate_speed_difference": cand_speed,
        "speed_difference_variation_pct": (100.0 * abs(cand_speed - base_speed)
                                           / base_speed if base_speed
                                           else 0.0),
    }
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "compare.json"
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    print(f"wrote {out_path} (communication reduced "
          f"{doc['comm_rate_reduction_pct']:.1f}%)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "baseline":
            return cmd_baseline(args)
        if args.command == "compare":
            return cmd_compare(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
