"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 invalid input (config, trace file,
device name), 3 a ``--assert`` check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import report as rp
from .config import config_to_dict, load_config
from .detectors import DEFAULT_THRESHOLD_FACTOR, pacer_c_init, pacer_c_scan
from .devices import builtin_models, draw_completion, get_model, model_to_dict, simulate_operation
from .harness import ConfigError, control_delay, poll_until_complete
from .suite import TABLES, calibrate, run_table, run_with_control, summarize
from .trace import (
    DEFAULT_FILTER_WINDOW,
    State,
    TraceFormatError,
    energy_by_state,
    moving_average,
    read_trace_csv,
    write_trace_csv,
)

OUTPUT_ENV = "SLACKBENCH_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_ASSERT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(arg) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ENV) or "slackbench-out")


def _emit(rows: list[list], fmt: str, header: list[str]):
    if fmt == "json":
        print(json.dumps([dict(zip(header, r)) for r in rows], indent=2, sort_keys=True))
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    else:
        widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
        for r in [header, *rows]:
            print("  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip())


# -- subcommands ---------------------------------------------------------------

def cmd_list_devices(args) -> int:
    rows = []
    for m in builtin_models().values():
        ops = ", ".join(f"{op} x{n}" for op, n in m.workload)
        rows.append([m.name, ops, m.control, m.description])
    _emit(rows, args.format, ["device", "workload", "control", "description"])
    if args.export:
        out = _output_dir(args.output)
        for m in builtin_models().values():
            rp.write_atomic(out / f"{m.name}.yaml", _yaml(model_to_dict(m)))
        print(f"model files written to {out}", file=sys.stderr)
    return EXIT_OK


def _yaml(d) -> str:
    return yaml.safe_dump(d, sort_keys=False)


def cmd_run(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    result = run_with_control(cfg)
    rows = result.rows()
    out = _output_dir(args.output)
    stem = Path(args.config).stem
    doc = {
        "config": config_to_dict(cfg),
        "control": result.control.to_dict(),
        "treatment": result.treatment.to_dict(),
        "treatment_iodvs": None if result.treatment_iodvs is None else result.treatment_iodvs.to_dict(),
        "diff": rows,
    }
    rp.write_json(out / f"{stem}.json", doc)
    rp.write_atomic(out / f"{stem}.csv", rp.table_csv(rows, cfg.detector.kind))
    if not args.no_figures:
        rp.plot_stage_bars(rows, cfg.detector.kind, out / f"{stem}_stages.png", title=result.device)
        series = {"Control": result.control, rp.DETECTOR_LABELS[cfg.detector.kind]: result.treatment}
        if result.treatment_iodvs is not None:
            series["PACER+IODVS"] = result.treatment_iodvs
        rp.plot_trials(series, "wait_latency" if not result.control.energy_only else "all_energy",
                       out / f"{stem}_trials.png", warmup=cfg.warmup)
    if args.format == "json":
        sys.stdout.write(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv":
        sys.stdout.write(rp.table_csv(rows, cfg.detector.kind))
    else:
        sys.stdout.write(rp.format_table(rows, cfg.detector.kind))
        for flag in result.treatment.flags:
            print(f"note: {flag}")
    return EXIT_OK


def cmd_suite(args) -> int:
    out = _output_dir(args.output)
    started = time.perf_counter()
    tables = []
    for spec in TABLES:
        t = run_table(spec, seed=args.seed, trials=args.trials, warmup=min(20, args.trials - 1))
        tables.append(t)
        rows = t.rows()
        rp.write_atomic(out / f"{spec.name}.csv", rp.table_csv(rows, spec.detector))
        if not args.no_figures:
            rp.plot_stage_bars(rows, spec.detector, out / f"{spec.name}.png", title=spec.title)
        print(f"== {spec.title} ({spec.name})")
        sys.stdout.write(rp.format_table(rows, spec.detector))
    summary = summarize(tables)
    elapsed = time.perf_counter() - started
    doc = {
        "max_energy_reduction_pct": summary.max_energy_reduction,
        "max_energy_reduction_at": summary.max_energy_reduction_at,
        "max_all_latency_reduction_pct": summary.max_all_latency_reduction,
        "max_all_latency_reduction_at": summary.max_all_latency_reduction_at,
        "energy_claim_pct": summary.energy_claim,
        "latency_claim_pct": summary.latency_claim,
        "energy_claim_met": summary.energy_ok,
        "latency_claim_met": summary.latency_ok,
        "verify_failures": summary.verify_failures,
        "seed": args.seed,
        "trials": args.trials,
    }
    rp.write_json(out / "summary.json", doc)
    print(f"max energy reduction     {summary.max_energy_reduction:.1f}% ({summary.max_energy_reduction_at})"
          f"  {'ok' if summary.energy_ok else 'BELOW'} >= {summary.energy_claim:.0f}%")
    print(f"max all-latency reduction {summary.max_all_latency_reduction:.1f}% "
          f"({summary.max_all_latency_reduction_at})  {'ok' if summary.latency_ok else 'BELOW'} "
          f">= {summary.latency_claim:.0f}%")
    print(f"verify failures          {summary.verify_failures}")
    print(f"elapsed                  {elapsed:.1f} s; outputs in {out}")
    if args.assert_claims and not summary.ok:
        return EXIT_ASSERT
    return EXIT_OK


def cmd_calibrate(args) -> int:
    rows = calibrate(args.device, seed=args.seed)
    table = [[r.stage, f"{r.target:g}", f"{r.measured:.2f}", f"{r.deviation * 100:+.2f}%", "ok" if r.ok else "FLAG"]
             for r in rows]
    _emit(table, args.format, ["stage", "target", "measured", "deviation", "status"])
    if args.assert_claims and not all(r.ok for r in rows):
        return EXIT_ASSERT
    return EXIT_OK


def cmd_export_trace(args) -> int:
    model = get_model(args.device)
    op = args.op or model.workload[0][0]
    try:
        spec = model.operation(op)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    seed = (args.seed, 0, 0)
    if args.delay_ms is not None:
        delay = args.delay_ms * 1e-3
    else:
        # the control wait, extended by polling if the device is still busy
        t_star = draw_completion(model, op, seed)[0]
        delay = poll_until_complete(control_delay(model, op), t_star, 100e-6, spec.worst_case_wait)
    out = simulate_operation(model, op, delay + spec.wait_overhead, seed)
    path = Path(args.output)
    write_trace_csv(out.trace, path)
    parts = energy_by_state(out.trace)
    truth = {
        "device": model.name,
        "operation": op,
        "seed": args.seed,
        "host_delay_s": delay,
        "sample_period_s": out.trace.sample_period,
        "true_completion_s": out.true_completion_time,
        "wait_start_s": out.wait_start * out.trace.sample_period,
        "completion_time_in_trace_s": out.wait_start * out.trace.sample_period + out.true_completion_time,
        "clamped": out.clamped,
        "energy_by_state_j": parts.by_state,
        "energy_total_j": parts.total,
    }
    rp.write_json(path.with_suffix(".truth.json"), truth)
    if not args.no_figures:
        rp.plot_trace(out.trace, path.with_suffix(".png"),
                      marks={"completion": truth["completion_time_in_trace_s"]}, title=f"{model.name} {op}")
    print(f"wrote {path} ({len(out.trace)} samples), true completion "
          f"{out.true_completion_time * 1e3:.3f} ms after Wait start")
    return EXIT_OK


def analyze_trace(trace, threshold_factor=DEFAULT_THRESHOLD_FACTOR, min_latency=0.0,
                  window=DEFAULT_FILTER_WINDOW, idle_current=None) -> dict:
    """Offline return-to-idle detection over a recorded trace.

    Idle current is the mean of the leading Idle samples unless given. Time
    zero for detection is the first Wait sample, or the trace start if the
    trace has no Wait phase.
    """
    ts = trace.sample_period
    st = trace.state
    span = trace.state_span(State.WAIT)
    origin = span[0] if span else 0
    stop = span[1] if span else len(trace)
    if idle_current is None:
        lead = np.flatnonzero(st[:origin] != int(State.IDLE)) if origin else np.array([], dtype=int)
        n_lead = int(lead[0]) if lead.size else origin
        if n_lead == 0:
            if span is not None or not np.all(st == int(State.IDLE)):
                raise ValueError("trace has no leading idle samples; pass an idle current")
            n_lead = len(trace)
        idle_current = float(np.mean(trace.current[:n_lead]))
    cstate = pacer_c_init(idle_current, threshold_factor, min_latency)
    filtered = moving_average(trace.current[:stop], window)[origin:stop]
    k = pacer_c_scan(cstate, filtered, ts)
    parts = energy_by_state(trace)
    detected = None if k is None else k * ts
    end = (stop - origin) * ts
    return {
        "idle_current_a": idle_current,
        "ict_a": cstate.ict,
        "min_latency_s": min_latency,
        "filter_window": window,
        "detection_origin_s": origin * ts,
        "detected_completion_s": detected,
        "detected_completion_in_trace_s": None if detected is None else origin * ts + detected,
        "slack_s": None if detected is None else end - detected,
        "window_end_s": end,
        "energy_by_state_j": parts.by_state,
        "energy_total_j": parts.total,
    }


def cmd_analyze(args) -> int:
    trace = read_trace_csv(args.trace)
    try:
        res = analyze_trace(
            trace, args.threshold_factor, args.min_latency_ms * 1e-3, args.filter_window,
            None if args.idle_ma is None else args.idle_ma * 1e-3,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res["trace"] = str(args.trace)
    if args.output:
        rp.write_json(args.output, res)
        if not args.no_figures:
            filtered = moving_average(trace.current, args.filter_window)
            rp.plot_trace(trace, Path(args.output).with_suffix(".png"), filtered=filtered,
                          marks={"detected": res["detected_completion_in_trace_s"]})
    if args.format == "json":
        print(json.dumps(res, indent=2, sort_keys=True))
        return EXIT_OK
    det = res["detected_completion_s"]
    rows = [
        ["idle current (mA)", f"{res['idle_current_a'] * 1e3:.4f}"],
        ["threshold (mA)", f"{res['ict_a'] * 1e3:.4f}"],
        ["detected completion (ms)", "not detected" if det is None else f"{det * 1e3:.3f}"],
        ["slack (ms)", "n/a" if det is None else f"{res['slack_s'] * 1e3:.3f}"],
    ]
    rows += [[f"{s} energy (uJ)", f"{e * 1e6:.4f}"] for s, e in res["energy_by_state_j"].items()]
    rows.append(["total energy (uJ)", f"{res['energy_total_j'] * 1e6:.4f}"])
    _emit(rows, args.format, ["quantity", "value"])
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slackbench", description="Early-completion detection benchmarks for simulated peripherals.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fmt = dict(choices=("text", "json", "csv"), default="text", help="stdout format")

    s = sub.add_parser("list-devices", help="list builtin device models")
    s.add_argument("--format", **fmt)
    s.add_argument("--export", action="store_true", help="also write each model as YAML")
    s.add_argument("--output", help=f"directory for --export (default ${OUTPUT_ENV} or ./slackbench-out)")
    s.set_defaults(func=cmd_list_devices)

    s = sub.add_parser("run", help="run one experiment next to its control")
    s.add_argument("--config", required=True, help="experiment YAML")
    s.add_argument("--output", help=f"report directory (default ${OUTPUT_ENV} or ./slackbench-out)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--format", **fmt)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="reproduce every benchmark table")
    s.add_argument("--output", help=f"report directory (default ${OUTPUT_ENV} or ./slackbench-out)")
    s.add_argument("--seed", type=int, default=2016)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--assert", dest="assert_claims", action="store_true",
                   help="exit 3 unless the headline reductions are reached")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_suite)

    s = sub.add_parser("calibrate", help="check a builtin model's control means")
    s.add_argument("device")
    s.add_argument("--seed", type=int, default=2016)
    s.add_argument("--format", **fmt)
    s.add_argument("--assert", dest="assert_claims", action="store_true", help="exit 3 on any flagged stage")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("export-trace", help="simulate one operation and write its trace CSV")
    s.add_argument("device")
    s.add_argument("--op", help="operation (default: first in the workload)")
    s.add_argument("--delay-ms", type=float, help="host wait (default: the control wait)")
    s.add_argument("--seed", type=int, default=2016)
    s.add_argument("--output", required=True, help="trace CSV path")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_export_trace)

    s = sub.add_parser("analyze", help="detect return to idle in a trace CSV")
    s.add_argument("trace")
    s.add_argument("--threshold-factor", type=float, default=DEFAULT_THRESHOLD_FACTOR)
    s.add_argument("--min-latency-ms", type=float, default=0.0)
    s.add_argument("--filter-window", type=int, default=DEFAULT_FILTER_WINDOW)
    s.add_argument("--idle-ma", type=float, help="idle current (default: mean of leading idle samples)")
    s.add_argument("--output", help="write the result as JSON (plus a figure)")
    s.add_argument("--format", **fmt)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TraceFormatError as exc:
        print(f"error: {getattr(args, 'trace', '')}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
