"""Simulated peripherals that emit current traces with known completion times.

Each operation runs Idle -> Active -> Wait -> Verify. The device is really
busy for only part of the Wait phase; when its internal operation finishes
the current falls back to the idle level, while the trace stays labelled
Wait until the host stops waiting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np
import yaml

from .power import IODVSPolicy
from .trace import DEFAULT_SAMPLE_PERIOD, CurrentTrace, State

IDLE_LEAD_IN = 200e-6
NOISE_FRACTION = 0.02

WAIT_SHAPES = ("constant", "stepped", "decaying")


class PollStatus(Enum):
    BUSY = "busy"
    COMPLETE = "complete"


class Verdict(Enum):
    PASS = "pass"
    FAIL = "fail"

    def __bool__(self):
        return self is Verdict.PASS


@dataclass(frozen=True)
class Deterministic:
    t: float

    kind = "deterministic"

    def draw(self, rng: np.random.Generator) -> tuple[float, bool]:
        return self.t, False

    def median(self) -> float:
        return self.t

    def scaled(self, k: float) -> "Deterministic":
        return Deterministic(self.t * k)


@dataclass(frozen=True)
class Normal:
    mean: float
    stddev: float

    kind = "normal"

    def __post_init__(self):
        if self.stddev < 0:
            raise ValueError("stddev must be >= 0")

    def draw(self, rng: np.random.Generator) -> tuple[float, bool]:
        return float(rng.normal(self.mean, self.stddev)), False

    def median(self) -> float:
        return self.mean

    def scaled(self, k: float) -> "Normal":
        return Normal(self.mean * k, self.stddev * k)


@dataclass(frozen=True)
class Bimodal:
    """Cache hit / miss completion times."""

    t_hit: float
    t_miss: float
    p_miss: float

    kind = "bimodal"

    def __post_init__(self):
        if not 0 <= self.p_miss <= 1:
            raise ValueError("p_miss must be in [0, 1]")

    def draw(self, rng: np.random.Generator) -> tuple[float, bool]:
        miss = bool(rng.random() < self.p_miss)
        return (self.t_miss if miss else self.t_hit), miss

    def median(self) -> float:
        if self.p_miss > 0.5:
            return self.t_miss
        if self.p_miss < 0.5:
            return self.t_hit
        return 0.5 * (self.t_hit + self.t_miss)

    def scaled(self, k: float) -> "Bimodal":
        return Bimodal(self.t_hit * k, self.t_miss * k, self.p_miss)


Completion = Union[Deterministic, Normal, Bimodal]


@dataclass(frozen=True)
class OperationSpec:
    worst_case_wait: float
    completion: Completion
    active_duration: float
    verify_duration: float
    active_current: float
    wait_current: float
    verify_current: float
    wait_shape: str = "stepped"
    noise_stddev: float | None = None
    miss_wait_current: float | None = None
    wait_overhead: float = 0.0

    def __post_init__(self):
        if self.worst_case_wait <= 0:
            raise ValueError("worst_case_wait must be > 0")
        if self.wait_shape not in WAIT_SHAPES:
            raise ValueError(f"wait_shape must be one of {WAIT_SHAPES}")
        currents = [self.active_current, self.wait_current, self.verify_current]
        if self.miss_wait_current is not None:
            currents.append(self.miss_wait_current)
        if min(currents) < 0:
            raise ValueError("mean currents must be >= 0")
        if min(self.active_duration, self.verify_duration, self.wait_overhead) < 0:
            raise ValueError("durations must be >= 0")
        if self.noise_stddev is None:
            object.__setattr__(self, "noise_stddev", NOISE_FRACTION * self.active_current)
        if self.noise_stddev < 0:
            raise ValueError("noise_stddev must be >= 0")


@dataclass(frozen=True)
class DeviceModel:
    name: str
    operations: dict[str, OperationSpec]
    idle_current: float
    supply_voltage: float
    description: str = ""
    workload: tuple[tuple[str, int], ...] = ()
    control: str = "worst_case"
    iodvs: IODVSPolicy | None = None
    energy_only: bool = False

    def __post_init__(self):
        if self.idle_current <= 0:
            raise ValueError("idle_current must be > 0")
        if self.supply_voltage <= 0:
            raise ValueError("supply_voltage must be > 0")
        if self.control not in ("worst_case", "median"):
            raise ValueError("control must be 'worst_case' or 'median'")
        if not self.workload:
            object.__setattr__(self, "workload", tuple((op, 1) for op in self.operations))
        for op, count in self.workload:
            self.operation(op)
            if count < 1:
                raise ValueError("workload counts must be >= 1")

    def operation(self, op: str) -> OperationSpec:
        try:
            return self.operations[op]
        except KeyError:
            raise KeyError(
                f"device {self.name!r} has no operation {op!r} "
                f"(available: {', '.join(sorted(self.operations))})"
            ) from None


@dataclass(frozen=True)
class OperationOutcome:
    trace: CurrentTrace
    true_completion_time: float
    clamped: bool
    op: str = ""
    wait_start: int = 0
    wait_stop: int = 0
    missed: bool = False

    @property
    def wait_start_time(self) -> float:
        return self.wait_start * self.trace.sample_period


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def _streams(seed) -> list[np.random.Generator]:
    # completion draw, idle noise, active noise, wait noise, verify noise
    return [np.random.default_rng(s) for s in _seed_sequence(seed).spawn(5)]


def _clamp(t: float, spec: OperationSpec, sample_period: float) -> tuple[float, bool]:
    if t > spec.worst_case_wait:
        return spec.worst_case_wait, True
    if t < sample_period:
        return sample_period, True
    return t, False


def draw_completion(
    model: DeviceModel, op: str, seed, *, completion_scale: float = 1.0,
    sample_period: float = DEFAULT_SAMPLE_PERIOD,
) -> tuple[float, bool, bool]:
    """Ground-truth completion for ``seed`` without building a trace.

    Returns (completion time, clamped, cache miss). Matches what
    simulate_operation would produce for the same arguments.
    """
    spec = model.operation(op)
    raw, miss = spec.completion.draw(_streams(seed)[0])
    t, clamped = _clamp(raw * completion_scale, spec, sample_period)
    return t, clamped, miss


def _wait_profile(spec: OperationSpec, level: float, idle: float, t_star: float, t: np.ndarray) -> np.ndarray:
    busy = t < t_star
    if spec.wait_shape == "constant":
        prof = np.full(t.shape, level)
    elif spec.wait_shape == "stepped":
        # programming pulse over the first tenth, then a hold plateau
        hold = level / 1.05
        prof = np.where(t < 0.1 * t_star, 1.5 * hold, hold)
    else:
        tau = 0.5 * t_star
        end = idle + 0.6 * (level - idle)
        amp = 0.4 * (level - idle) / ((tau / t_star) * (1.0 - math.exp(-t_star / tau)))
        prof = end + amp * np.exp(-t / tau)
    return np.where(busy, prof, idle)


def _samples(duration: float, sample_period: float) -> int:
    return int(round(duration / sample_period))


def simulate_operation(
    model: DeviceModel,
    op: str,
    host_delay: float,
    seed,
    *,
    completion_scale: float = 1.0,
    sample_period: float = DEFAULT_SAMPLE_PERIOD,
    idle_duration: float = IDLE_LEAD_IN,
) -> OperationOutcome:
    """Synthesize one operation whose Wait phase lasts ``host_delay`` seconds.

    The same seed always yields the same completion time and noise, and the
    Wait-phase samples for a shorter delay are a prefix of those for a
    longer one.
    """
    if host_delay < 0:
        raise ValueError("host_delay must be >= 0")
    spec = model.operation(op)
    rng_c, rng_idle, rng_act, rng_wait, rng_ver = _streams(seed)
    raw, miss = spec.completion.draw(rng_c)
    t_star, clamped = _clamp(raw * completion_scale, spec, sample_period)

    n_idle = _samples(idle_duration, sample_period)
    n_act = _samples(spec.active_duration, sample_period)
    n_wait = _samples(host_delay, sample_period)
    n_ver = _samples(spec.verify_duration, sample_period)
    sd = spec.noise_stddev

    level = spec.miss_wait_current if (miss and spec.miss_wait_current is not None) else spec.wait_current
    t_wait = np.arange(n_wait) * sample_period
    wait = _wait_profile(spec, level, model.idle_current, t_star, t_wait)

    current = np.concatenate([
        model.idle_current + sd * rng_idle.standard_normal(n_idle),
        spec.active_current + sd * rng_act.standard_normal(n_act),
        wait + sd * rng_wait.standard_normal(n_wait),
        spec.verify_current + sd * rng_ver.standard_normal(n_ver),
    ])
    state = np.concatenate([
        np.full(n_idle, State.IDLE, np.int8),
        np.full(n_act, State.ACTIVE, np.int8),
        np.full(n_wait, State.WAIT, np.int8),
        np.full(n_ver, State.VERIFY, np.int8),
    ])
    voltage = np.full(current.size, model.supply_voltage)
    trace = CurrentTrace(voltage, current, state, sample_period)
    start = n_idle + n_act
    return OperationOutcome(trace, t_star, clamped, op, start, start + n_wait, miss)


def poll_status(outcome: OperationOutcome, t: float) -> PollStatus:
    return PollStatus.COMPLETE if t >= outcome.true_completion_time else PollStatus.BUSY


def verify_operation(outcome: OperationOutcome, issued_wait: float) -> Verdict:
    """Read-back check: the data is intact only if the host waited long enough."""
    if issued_wait < 0:
        raise ValueError("issued_wait must be >= 0")
    return Verdict.PASS if issued_wait >= outcome.true_completion_time else Verdict.FAIL


# Builtin models. Currents are chosen so the 50-trial control runs land on
# the measured control columns; see ``suite.CONTROL_TARGETS``.

def _ma(x):
    return x * 1e-3


def _eeprom() -> DeviceModel:
    v = 3.3
    page = OperationSpec(
        worst_case_wait=5e-3,
        completion=Deterministic(3.455e-3),
        active_duration=0.45e-3,
        verify_duration=0.48e-3,
        active_current=_ma(1.988),
        wait_current=_ma(3.295),
        verify_current=_ma(1.988),
        wait_shape="stepped",
        wait_overhead=0.05e-3,
    )
    return DeviceModel(
        "eeprom", {"page_write": page}, _ma(1.7606), v,
        description="MCP25AA512 SPI EEPROM, 5 ms page write",
        workload=(("page_write", 1),),
        iodvs=IODVSPolicy(v, 2.4255),
    )


def _nor_flash() -> DeviceModel:
    v = 3.3
    common = dict(
        active_duration=0.7e-3, verify_duration=0.6667e-3,
        active_current=_ma(4.311), verify_current=_ma(4.311),
        wait_current=_ma(5.371), wait_shape="stepped", wait_overhead=0.1744e-3,
    )
    erase = OperationSpec(worst_case_wait=150e-3, completion=Deterministic(65e-3), **common)
    page = OperationSpec(worst_case_wait=10e-3, completion=Deterministic(0.3569e-3), **common)
    return DeviceModel(
        "nor_flash", {"subsector_erase": erase, "page_write": page}, _ma(1.7316), v,
        description="M25PX16 NOR serial flash, subsector erase + page writes",
        workload=(("subsector_erase", 1), ("page_write", 8)),
        iodvs=IODVSPolicy(v, 2.772),
    )


def _nand_flash() -> DeviceModel:
    v = 3.3
    page = OperationSpec(
        worst_case_wait=3.5e-3,
        completion=Deterministic(1.0981e-3),
        active_duration=0.45e-3,
        verify_duration=0.4044e-3,
        active_current=_ma(4.28),
        wait_current=_ma(13.717),
        verify_current=_ma(4.28),
        wait_shape="stepped",
        wait_overhead=0.1006e-3,
    )
    return DeviceModel(
        "nand_flash", {"page_write": page}, _ma(1.9502), v,
        description="SST26VF016B serial NAND-style flash, page writes",
        workload=(("page_write", 16),),
        iodvs=IODVSPolicy(v, 2.394),
    )


def _hih6130() -> DeviceModel:
    v = 3.3
    measure = OperationSpec(
        worst_case_wait=45e-3,
        completion=Deterministic(31.175e-3),
        active_duration=0.4e-3,
        verify_duration=0.32e-3,
        active_current=_ma(2.02),
        wait_current=_ma(2.3191),
        verify_current=_ma(2.02),
        wait_shape="decaying",
        wait_overhead=0.27e-3,
    )
    return DeviceModel(
        "hih6130", {"measure": measure}, _ma(1.8783), v,
        description="HIH-6130 temperature/humidity sensor measurement",
        workload=(("measure", 1),),
        iodvs=IODVSPolicy(v, 2.329),
    )


def _sd(name, description, completion, idle, wait, miss, active, verify_duration, v_wait, writes):
    v = 3.3
    write = OperationSpec(
        worst_case_wait=250e-3,
        completion=completion,
        active_duration=0.3e-3,
        verify_duration=verify_duration,
        active_current=_ma(active),
        wait_current=_ma(wait),
        verify_current=_ma(active),
        wait_shape="stepped",
        miss_wait_current=None if miss is None else _ma(miss),
        wait_overhead=0.02e-3,
    )
    return DeviceModel(
        name, {"block_write": write}, _ma(idle), v,
        description=description,
        workload=(("block_write", writes),),
        control="median",
        iodvs=IODVSPolicy(v, v_wait),
        energy_only=True,
    )


def _sd_cards() -> list[DeviceModel]:
    return [
        _sd("sd_sandisk", "Sandisk Micro-SD, bimodal cache hit/miss writes",
            Bimodal(0.5e-3, 3.0e-3, 0.65), idle=45.312, wait=56.64, miss=122.72,
            active=47.2, verify_duration=0.3e-3, v_wait=2.49, writes=16),
        _sd("sd_lexar", "Lexar Micro-SD, bimodal cache hit/miss writes",
            Bimodal(0.6e-3, 3.5e-3, 0.7), idle=30.945, wait=61.89, miss=144.41,
            active=51.575, verify_duration=0.3e-3, v_wait=2.557, writes=16),
        _sd("sd_swissbit", "Swissbit Micro-SD, near-normal write latency",
            Normal(2.0e-3, 0.493e-3), idle=1.32, wait=4.576, miss=None,
            active=4.4, verify_duration=0.2e-3, v_wait=1.69, writes=24),
        _sd("sd_kingston", "Kingston Micro-SD, tightly clustered write latency",
            Normal(8.0e-3, 0.005e-3), idle=3.36, wait=33.6, miss=None,
            active=22.4, verify_duration=0.2e-3, v_wait=3.185, writes=1),
    ]


def builtin_models() -> dict[str, DeviceModel]:
    models = [_eeprom(), _nor_flash(), _nand_flash(), *_sd_cards(), _hih6130()]
    return {m.name: m for m in models}


def get_model(name: str) -> DeviceModel:
    models = builtin_models()
    try:
        return models[name]
    except KeyError:
        raise KeyError(f"unknown device {name!r} (available: {', '.join(models)})") from None


# Model definition files (YAML, units in key names).

def _completion_to_dict(c: Completion) -> dict:
    if isinstance(c, Deterministic):
        return {"kind": "deterministic", "t_ms": _clean(c.t * 1e3)}
    if isinstance(c, Normal):
        return {"kind": "normal", "mean_ms": _clean(c.mean * 1e3), "stddev_ms": _clean(c.stddev * 1e3)}
    return {"kind": "bimodal", "t_hit_ms": _clean(c.t_hit * 1e3), "t_miss_ms": _clean(c.t_miss * 1e3),
            "p_miss": c.p_miss}


def _completion_from_dict(d: dict, where: str) -> Completion:
    kind = d.get("kind")
    try:
        if kind == "deterministic":
            return Deterministic(float(d["t_ms"]) * 1e-3)
        if kind == "normal":
            return Normal(float(d["mean_ms"]) * 1e-3, float(d["stddev_ms"]) * 1e-3)
        if kind == "bimodal":
            return Bimodal(float(d["t_hit_ms"]) * 1e-3, float(d["t_miss_ms"]) * 1e-3, float(d["p_miss"]))
    except KeyError as exc:
        raise ValueError(f"{where}.{exc.args[0]}: missing key") from None
    raise ValueError(f"{where}.kind: expected deterministic, normal or bimodal, got {kind!r}")


_OP_KEYS = {
    "worst_case_wait_ms": ("worst_case_wait", 1e-3),
    "active_duration_ms": ("active_duration", 1e-3),
    "verify_duration_ms": ("verify_duration", 1e-3),
    "active_current_ma": ("active_current", 1e-3),
    "wait_current_ma": ("wait_current", 1e-3),
    "verify_current_ma": ("verify_current", 1e-3),
    "noise_stddev_ma": ("noise_stddev", 1e-3),
    "miss_wait_current_ma": ("miss_wait_current", 1e-3),
    "wait_overhead_ms": ("wait_overhead", 1e-3),
}


def _clean(x: float) -> float:
    # drop the unit-conversion residue (0.35690000000000005 -> 0.3569)
    return float(f"{x:.15g}")


def model_to_dict(model: DeviceModel) -> dict:
    ops = {}
    for name, spec in model.operations.items():
        d = {}
        for key, (attr, unit) in _OP_KEYS.items():
            val = getattr(spec, attr)
            if val is not None:
                d[key] = _clean(val / unit)
        d["wait_shape"] = spec.wait_shape
        d["completion"] = _completion_to_dict(spec.completion)
        ops[name] = d
    out = {
        "name": model.name,
        "description": model.description,
        "supply_voltage_v": model.supply_voltage,
        "idle_current_ma": _clean(model.idle_current * 1e3),
        "control": model.control,
        "energy_only": model.energy_only,
        "workload": [{"op": op, "count": n} for op, n in model.workload],
        "operations": ops,
    }
    if model.iodvs is not None:
        out["iodvs"] = {
            "v_wait_v": model.iodvs.v_wait,
            "wait_current_scale": model.iodvs.wait_current_scale,
        }
    return out


def model_from_dict(d: dict) -> DeviceModel:
    def need(mapping, key, where):
        if key not in mapping:
            raise ValueError(f"{where}{key}: missing key")
        return mapping[key]

    v = float(need(d, "supply_voltage_v", ""))
    ops = {}
    for name, od in need(d, "operations", "").items():
        where = f"operations.{name}."
        kwargs = {}
        for key, (attr, unit) in _OP_KEYS.items():
            if key in od:
                kwargs[attr] = float(od[key]) * unit
        for req in ("worst_case_wait_ms", "active_duration_ms", "verify_duration_ms",
                    "active_current_ma", "wait_current_ma", "verify_current_ma"):
            need(od, req, where)
        kwargs["completion"] = _completion_from_dict(need(od, "completion", where), where + "completion")
        kwargs["wait_shape"] = od.get("wait_shape", "stepped")
        try:
            ops[name] = OperationSpec(**kwargs)
        except ValueError as exc:
            raise ValueError(f"{where[:-1]}: {exc}") from None
    iodvs = None
    if d.get("iodvs"):
        iodvs = IODVSPolicy(v, float(d["iodvs"]["v_wait_v"]), float(d["iodvs"].get("wait_current_scale", 1.0)))
    workload = tuple((w["op"], int(w.get("count", 1))) for w in d.get("workload", []))
    return DeviceModel(
        name=str(need(d, "name", "")),
        operations=ops,
        idle_current=float(need(d, "idle_current_ma", "")) * 1e-3,
        supply_voltage=v,
        description=d.get("description", ""),
        workload=workload,
        control=d.get("control", "worst_case"),
        iodvs=iodvs,
        energy_only=bool(d.get("energy_only", False)),
    )


def save_model(model: DeviceModel, path) -> None:
    Path(path).write_text(yaml.safe_dump(model_to_dict(model), sort_keys=False))


def load_model(path) -> DeviceModel:
    return model_from_dict(yaml.safe_load(Path(path).read_text()))


def with_completion(model: DeviceModel, op: str, completion: Completion) -> DeviceModel:
    ops = dict(model.operations)
    ops[op] = replace(ops[op], completion=completion)
    return replace(model, operations=ops)
