"""Closed-loop experiment runner.

A trial performs every operation in the workload once. For each operation
the detector picks how long the host waits; if the device is still busy
when that wait expires the host keeps polling until it completes, so no
trial ever moves on from an unfinished operation. Latency and energy per
stage come from the trace the host actually produced.

Every trial draws its completion times from seeds keyed on (seed, trial,
slot) only, so a control run and a detector run with the same seed see the
same device behaviour.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import detectors as det
from .devices import (
    DeviceModel,
    Normal,
    Bimodal,
    draw_completion,
    get_model,
    simulate_operation,
    verify_operation,
)
from .power import IODVSPolicy, OverheadModel, apply_iodvs, iodvs_transition_cost
from .trace import DEFAULT_FILTER_WINDOW, DEFAULT_SAMPLE_PERIOD, State, energy_by_state, energy_integrate, moving_average

DETECTOR_KINDS = ("control", "pacer_t", "pacer_e", "pacer_c")
STAGES = ("wait_latency", "all_latency", "wait_energy", "all_energy")

# seed-stream tags for draws that are not part of a numbered trial
_CALIBRATION_STREAM = 1_000_003
_CHARACTERIZATION_STREAM = 1_000_033
_CHARACTERIZATION_DRAWS = 50


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ComparisonError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "control"
    threshold_factor: float = det.DEFAULT_THRESHOLD_FACTOR
    min_latency: float | None = None
    resolution: float = det.DEFAULT_RESOLUTION
    widen_factor: float = det.DEFAULT_WIDEN_FACTOR
    relax_after: int | None = None
    filter_window: int = DEFAULT_FILTER_WINDOW

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ConfigError("detector.kind", f"expected one of {', '.join(DETECTOR_KINDS)}, got {self.kind!r}")
        if not self.threshold_factor > 1:
            raise ConfigError("detector.threshold_factor", "must be > 1")
        if self.min_latency is not None and self.min_latency < 0:
            raise ConfigError("detector.min_latency_ms", "must be >= 0")
        if self.resolution < 0:
            raise ConfigError("detector.resolution_us", "must be >= 0")
        if not self.widen_factor > 0:
            raise ConfigError("detector.widen_factor", "must be > 0")
        if self.relax_after is not None and self.relax_after < 1:
            raise ConfigError("detector.relax_after", "must be >= 1")
        if self.filter_window < 1:
            raise ConfigError("detector.filter_window", "must be >= 1")


@dataclass(frozen=True)
class DriftStep:
    """From trial ``at_trial`` on, completion times are multiplied by ``scale``."""

    at_trial: int
    scale: float


@dataclass(frozen=True)
class ExperimentConfig:
    device: str
    detector: DetectorConfig = DetectorConfig()
    operations: tuple[tuple[str, int], ...] | None = None
    iodvs: IODVSPolicy | None = None
    overhead: OverheadModel = OverheadModel()
    trials: int = 50
    warmup: int = 20
    seed: int = 2016
    drift: tuple[DriftStep, ...] = ()
    poll_period: float = 100e-6
    sample_period: float = DEFAULT_SAMPLE_PERIOD
    model: DeviceModel | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials.count", f"must be >= 1, got {self.trials}")
        if not 0 <= self.warmup < self.trials:
            raise ConfigError("trials.warmup", f"must satisfy 0 <= warmup < trials ({self.trials}), got {self.warmup}")
        if not self.poll_period > 0:
            raise ConfigError("poll_period_us", "must be > 0")
        if not self.sample_period > 0:
            raise ConfigError("sample_period_us", "must be > 0")
        for step in self.drift:
            if step.at_trial < 0 or not step.scale > 0:
                raise ConfigError("drift", "each step needs at_trial >= 0 and scale > 0")
        model = self.device_model()
        if self.operations is not None:
            for op, count in self.operations:
                if op not in model.operations:
                    raise ConfigError("operations", f"device {model.name!r} has no operation {op!r}")
                if count < 1:
                    raise ConfigError("operations", "counts must be >= 1")

    def device_model(self) -> DeviceModel:
        if self.model is not None:
            return self.model
        try:
            return get_model(self.device)
        except KeyError as exc:
            raise ConfigError("device", exc.args[0]) from None

    def workload(self) -> tuple[tuple[str, int], ...]:
        return self.operations if self.operations is not None else self.device_model().workload

    def slots(self) -> list[str]:
        return [op for op, n in self.workload() for _ in range(n)]

    def completion_scale(self, trial: int) -> float:
        scale = 1.0
        for step in sorted(self.drift, key=lambda s: s.at_trial):
            if trial >= step.at_trial:
                scale = step.scale
        return scale


@dataclass
class OpRecord:
    op: str
    issued: float
    target: float | None
    true_completion: float
    passed: bool
    extension: float
    event: str
    width: float | None


@dataclass
class TrialResult:
    wait_latency: float
    all_latency: float
    wait_energy: float
    all_energy: float
    passed: bool
    fail_extended: bool
    clamped: bool
    overhead_energy: float = 0.0
    ops: list[OpRecord] = field(default_factory=list)

    def stage(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class DetectorBank:
    """Per-operation detector state threaded from trial to trial."""

    kind: str
    states: dict
    policies: dict
    min_latency: dict


def _mean_std(xs: list[float]) -> dict:
    mean = math.fsum(xs) / len(xs)
    std = statistics.stdev(xs) if len(xs) > 1 else 0.0
    return {"mean": mean, "std": std}


def _calibration_wait_energy(cfg: ExperimentConfig, model: DeviceModel, op: str, slot: int) -> float:
    spec = model.operation(op)
    out = simulate_operation(model, op, spec.worst_case_wait, (cfg.seed, _CALIBRATION_STREAM, slot),
                             sample_period=cfg.sample_period)
    return energy_integrate(out.trace, out.wait_start, out.wait_stop)


def _characterized_min_latency(cfg: ExperimentConfig, model: DeviceModel, op: str) -> float:
    draws = [
        draw_completion(model, op, (cfg.seed, _CHARACTERIZATION_STREAM, k), sample_period=cfg.sample_period)[0]
        for k in range(_CHARACTERIZATION_DRAWS)
    ]
    return 0.5 * min(draws)


def init_detectors(cfg: ExperimentConfig, model: DeviceModel | None = None) -> DetectorBank:
    model = model or cfg.device_model()
    d = cfg.detector
    states, policies, min_lat = {}, {}, {}
    first_slot = {}
    for slot, op in enumerate(cfg.slots()):
        first_slot.setdefault(op, slot)
    for op, slot in first_slot.items():
        spec = model.operation(op)
        if d.kind == "pacer_t":
            states[op] = det.TimingHeuristicState.initial(spec.worst_case_wait)
            policies[op] = det.DriftPolicy(d.resolution, d.widen_factor, d.relax_after)
        elif d.kind == "pacer_e":
            e_wc = _calibration_wait_energy(cfg, model, op, slot)
            states[op] = det.EnergyHeuristicState.initial(e_wc)
            # resolution expressed as the energy of resolution-seconds of average wait power
            policies[op] = det.DriftPolicy(d.resolution * e_wc / spec.worst_case_wait, d.widen_factor, d.relax_after)
        elif d.kind == "pacer_c":
            min_lat[op] = d.min_latency if d.min_latency is not None else _characterized_min_latency(cfg, model, op)
    return DetectorBank(d.kind, states, policies, min_lat)


def control_delay(model: DeviceModel, op: str) -> float:
    spec = model.operation(op)
    if model.control == "median":
        return min(spec.completion.median(), spec.worst_case_wait)
    return spec.worst_case_wait


# Detection only looks backwards in time and the Wait-phase noise of a
# shorter probe is a prefix of a longer one's, so scanning a short window
# first and the full worst-case window only on a miss gives identical
# results at a fraction of the cost.
PROBE_SHORTCUT = True


def _probe(model, op, seed, scale, ts, t_star, wc, scan):
    horizons = [wc]
    if PROBE_SHORTCUT:
        short = min(wc, 2.0 * t_star + 1e-3)
        if short < wc:
            horizons.insert(0, short)
    for h in horizons:
        probe = simulate_operation(model, op, h, seed, completion_scale=scale, sample_period=ts)
        k, extra = scan(probe)
        if k is not None:
            return k, extra
    return None, extra


def poll_until_complete(issued: float, t_star: float, poll: float, worst_case: float) -> float:
    if issued >= t_star:
        return issued
    n = max(math.ceil((t_star - issued) / poll - 1e-9), 1)
    while issued + n * poll < t_star:
        n += 1
    return min(issued + n * poll, worst_case)


def run_trial(cfg: ExperimentConfig, bank: DetectorBank, trial_index: int,
              model: DeviceModel | None = None) -> tuple[TrialResult, DetectorBank]:
    model = model or cfg.device_model()
    ts = cfg.sample_period
    scale = cfg.completion_scale(trial_index)
    states = dict(bank.states)
    total = dict.fromkeys(STAGES, 0.0)
    overhead_energy = 0.0
    passed_all, extended_any, clamped_any = True, False, False
    records = []

    for slot, op in enumerate(cfg.slots()):
        spec = model.operation(op)
        seed = (cfg.seed, trial_index, slot)
        wc = spec.worst_case_wait
        target = None
        energy_at = None

        t_star, clamped, _ = draw_completion(model, op, seed, completion_scale=scale, sample_period=ts)

        if bank.kind == "control":
            issued = control_delay(model, op)
        elif bank.kind == "pacer_t":
            issued = det.pacer_t_issue(states[op], bank.policies[op])
        elif bank.kind == "pacer_e":
            target = det.pacer_e_target(states[op], bank.policies[op])

            def scan_e(probe):
                tr, ws, we = probe.trace, probe.wait_start, probe.wait_stop
                acc = det.cumulative_energy(tr.voltage[ws:we], tr.current[ws:we], ts)
                hits = np.flatnonzero(acc >= target)
                return (int(hits[0]) if hits.size else None), acc

            k, acc = _probe(model, op, seed, scale, ts, t_star, wc, scan_e)
            issued = (k + 1) * ts if k is not None else wc

            def energy_at(t, acc=acc):
                k = min(max(int(round(t / ts)), 1), acc.size)
                return float(acc[k - 1])
        else:
            def scan_c(probe):
                tr, ws, we = probe.trace, probe.wait_start, probe.wait_stop
                idle = float(np.mean(tr.current[:ws][tr.state[:ws] == int(State.IDLE)]))
                cstate = det.pacer_c_init(idle, cfg.detector.threshold_factor, bank.min_latency[op])
                filtered = moving_average(tr.current[:we], cfg.detector.filter_window)[ws:we]
                return det.pacer_c_scan(cstate, filtered, ts), None

            k, _ = _probe(model, op, seed, scale, ts, t_star, wc, scan_c)
            issued = k * ts if k is not None else wc
        issued = min(issued, wc)

        passed_first = issued >= t_star
        final = poll_until_complete(issued, t_star, cfg.poll_period, wc)
        extension = final - issued
        event, width = None, None

        if bank.kind == "pacer_t":
            observed = None if passed_first else final
            states[op], ev = det.pacer_t_feedback(states[op], bank.policies[op], issued, passed_first, observed)
            event, width = ev.value, states[op].width
        elif bank.kind == "pacer_e":
            s = states[op]
            if passed_first:
                e_issued = target if issued < wc else min(target, energy_at(issued))
                states[op], ev = det.pacer_e_feedback(s, bank.policies[op], e_issued, True)
            else:
                e_obs = max(energy_at(final), target)
                states[op], ev = det.pacer_e_feedback(s, bank.policies[op], target, False, e_obs)
            event, width = ev.value, states[op].width

        out = simulate_operation(model, op, final + spec.wait_overhead, seed, completion_scale=scale, sample_period=ts)
        verdict = verify_operation(out, final)
        trace = out.trace
        extra = extension * cfg.overhead.total
        if cfg.iodvs is not None:
            extra += iodvs_transition_cost(trace, cfg.iodvs)
            trace = apply_iodvs(trace, cfg.iodvs)
        parts = energy_by_state(trace).by_state
        n_wait = out.wait_stop - out.wait_start
        n_all = int(np.count_nonzero(trace.state != int(State.IDLE)))
        total["wait_latency"] += n_wait * ts
        total["all_latency"] += n_all * ts
        total["wait_energy"] += parts.get("wait", 0.0) + extra
        total["all_energy"] += math.fsum(parts.get(s, 0.0) for s in ("active", "wait", "verify")) + extra
        overhead_energy += extra

        passed_all &= bool(verdict)
        extended_any |= extension > 0
        clamped_any |= clamped
        records.append(OpRecord(op, issued, target, t_star, passed_first, extension, event or "", width))

    result = TrialResult(
        total["wait_latency"], total["all_latency"], total["wait_energy"], total["all_energy"],
        passed_all, extended_any, clamped_any, overhead_energy, records,
    )
    return result, replace(bank, states=states)


@dataclass
class BenchmarkReport:
    device: str
    detector: str
    iodvs: bool
    workload: list
    trials: int
    warmup: int
    seed: int
    stats: dict
    clamp_count: int
    fail_extension_count: int
    widen_count: int
    verify_failures: int
    energy_only: bool = False
    flags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    per_trial: list = field(default_factory=list)
    diff: dict | None = None

    @property
    def label(self) -> str:
        return self.detector + ("+iodvs" if self.iodvs else "")

    def mean(self, stage: str) -> float:
        return self.stats[stage]["mean"]

    def to_dict(self, include_trials: bool = True) -> dict:
        d = asdict(self)
        if not include_trials:
            d.pop("per_trial")
        return d

    def to_json(self, include_trials: bool = True) -> str:
        return json.dumps(self.to_dict(include_trials), indent=2, sort_keys=True) + "\n"


def _flags(cfg: ExperimentConfig, model: DeviceModel) -> list[str]:
    flags = []
    if cfg.detector.kind in ("pacer_t", "pacer_e"):
        for op, _ in cfg.workload():
            c = model.operation(op).completion
            if isinstance(c, Bimodal) or (isinstance(c, Normal) and c.stddev > 0):
                flags.append(f"{op}: non-deterministic completion under successive approximation")
    if not cfg.overhead.calibrated:
        flags.append("overhead model is not calibrated")
    return flags


def run_experiment(cfg: ExperimentConfig, *, keep_trials: bool = True) -> BenchmarkReport:
    model = cfg.device_model()
    bank = init_detectors(cfg, model)
    results: list[TrialResult] = []
    for k in range(cfg.trials):
        res, bank = run_trial(cfg, bank, k, model)
        results.append(res)
    kept = results[cfg.warmup:]
    stats = {s: _mean_std([r.stage(s) for r in kept]) for s in STAGES}
    widen = sum(1 for r in results for o in r.ops if o.event.startswith("widen"))
    per_trial = []
    if keep_trials:
        for k, r in enumerate(results):
            row = {s: r.stage(s) for s in STAGES}
            row.update(trial=k, passed=r.passed, fail_extended=r.fail_extended, clamped=r.clamped,
                       warmup=k < cfg.warmup)
            per_trial.append(row)
    return BenchmarkReport(
        device=model.name,
        detector=cfg.detector.kind,
        iodvs=cfg.iodvs is not None,
        workload=[[op, n] for op, n in cfg.workload()],
        trials=cfg.trials,
        warmup=cfg.warmup,
        seed=cfg.seed,
        stats=stats,
        clamp_count=sum(r.clamped for r in results),
        fail_extension_count=sum(r.fail_extended for r in results),
        widen_count=widen,
        verify_failures=sum(not r.passed for r in results),
        energy_only=model.energy_only,
        flags=_flags(cfg, model),
        metadata={
            "statistic": "mean and sample stddev over post-warmup trials",
            "control_policy": model.control,
            "sample_period_s": cfg.sample_period,
            "poll_period_s": cfg.poll_period,
            "overhead_power_w": cfg.overhead.total,
            "overhead_calibrated": cfg.overhead.calibrated,
            "iodvs": None if cfg.iodvs is None else asdict(cfg.iodvs),
        },
        per_trial=per_trial,
    )


@dataclass
class DiffRow:
    stage: str
    quantity: str
    control: float
    treatment: float
    diff_pct: float


def diff_pct(control: float, treatment: float) -> float:
    """Positive when the treatment improves on the control."""
    if control == 0:
        return 0.0
    return (control - treatment) / control * 100.0


def compare_reports(treatment: BenchmarkReport, control: BenchmarkReport) -> list[DiffRow]:
    if treatment.device != control.device or treatment.workload != control.workload:
        raise ComparisonError(
            f"cannot compare {treatment.device} {treatment.workload} against "
            f"{control.device} {control.workload}"
        )
    rows = []
    quantities = ("energy",) if control.energy_only else ("latency", "energy")
    for q in quantities:
        for stage in ("wait", "all"):
            key = f"{stage}_{q}"
            c, t = control.mean(key), treatment.mean(key)
            rows.append(DiffRow(stage.capitalize(), q, c, t, diff_pct(c, t)))
    return rows


def run_convergence_study(cfg: ExperimentConfig, max_trials: int) -> list[dict]:
    """Per-trial, per-operation log of issued values, outcomes and bracket width."""
    cfg = replace(cfg, trials=max(max_trials, 1), warmup=0)
    model = cfg.device_model()
    bank = init_detectors(cfg, model)
    log = []
    for k in range(max_trials):
        res, bank = run_trial(cfg, bank, k, model)
        for slot, rec in enumerate(res.ops):
            log.append({
                "trial": k,
                "slot": slot,
                "op": rec.op,
                "guess": rec.issued if rec.target is None else rec.target,
                "issued_delay": rec.issued,
                "true_completion": rec.true_completion,
                "result": "pass" if rec.passed else "fail",
                "width": rec.width,
                "event": rec.event,
                "extension": rec.extension,
            })
    return log
