"""Experiment configuration files.

Configs are YAML mappings with these sections (all optional except the
device)::

    device: eeprom                # builtin name, or
    device_file: my_device.yaml   # a model definition file
    operations:                   # defaults to the model's workload
      - {name: page_write, count: 1}
    detector:
      kind: pacer_t               # control | pacer_t | pacer_e | pacer_c
      threshold_factor: 1.10
      min_latency_ms: 1.5
      resolution_us: 10
      widen_factor: 2.0
      relax_after: 10
      filter_window: 50
    iodvs: default                # or a mapping, or omitted
    overhead: {p_mcu_w: 0.25, p_mcd_w: 0.02, p_match_w: 0.01, p_dev_w: 0.02,
               comm_c_pf: 50, comm_f_mhz: 25, comm_vdd_v: 3.3, calibrated: false}
    trials: {count: 50, warmup: 20}
    seed: 2016
    drift: [{at_trial: 25, scale: 1.15}]
    poll_period_us: 100
    sample_period_us: 1

Every error names the key it is about.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import yaml

from .devices import DeviceModel, load_model
from .harness import ConfigError, DetectorConfig, DriftStep, ExperimentConfig
from .power import CommPower, IODVSPolicy, OverheadModel

_TOP_KEYS = {
    "device", "device_file", "operations", "detector", "iodvs", "overhead",
    "trials", "seed", "drift", "poll_period_us", "sample_period_us",
}
_DETECTOR_KEYS = {"kind", "threshold_factor", "min_latency_ms", "resolution_us", "widen_factor",
                  "relax_after", "filter_window"}
_IODVS_KEYS = {"v_nominal_v", "v_wait_v", "wait_current_scale", "transition_energy_uj"}
_OVERHEAD_KEYS = {"p_mcu_w", "p_mcd_w", "p_match_w", "p_dev_w", "comm_c_pf", "comm_f_mhz",
                  "comm_vdd_v", "calibrated"}
_TRIALS_KEYS = {"count", "warmup"}


def _section(d, key) -> dict:
    v = d.get(key)
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ConfigError(key, "expected a mapping")
    return v


def _check_keys(d: dict, allowed: set, where: str):
    for k in d:
        if k not in allowed:
            name = f"{where}.{k}" if where else str(k)
            raise ConfigError(name, f"unknown key (expected one of {', '.join(sorted(allowed))})")


def _num(d: dict, key: str, where: str, default=None, kind=float):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}" if where else key, f"expected a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise ConfigError(f"{where}.{key}" if where else key, f"expected an integer, got {v!r}")
    return kind(v)


def _detector(d: dict) -> DetectorConfig:
    _check_keys(d, _DETECTOR_KEYS, "detector")
    kw = {"kind": str(d.get("kind", "control"))}
    if "threshold_factor" in d:
        kw["threshold_factor"] = _num(d, "threshold_factor", "detector")
    ml = _num(d, "min_latency_ms", "detector")
    if ml is not None:
        kw["min_latency"] = ml / 1e3
    res = _num(d, "resolution_us", "detector")
    if res is not None:
        kw["resolution"] = res / 1e6
    if "widen_factor" in d:
        kw["widen_factor"] = _num(d, "widen_factor", "detector")
    if d.get("relax_after") is not None:
        kw["relax_after"] = _num(d, "relax_after", "detector", kind=int)
    if "filter_window" in d:
        kw["filter_window"] = _num(d, "filter_window", "detector", kind=int)
    return DetectorConfig(**kw)


def _iodvs(v, model: DeviceModel) -> IODVSPolicy | None:
    if v is None or v is False:
        return None
    if v is True or v == "default":
        if model.iodvs is None:
            raise ConfigError("iodvs", f"device {model.name!r} has no default IODVS policy")
        return model.iodvs
    if not isinstance(v, dict):
        raise ConfigError("iodvs", "expected 'default', a mapping, or nothing")
    _check_keys(v, _IODVS_KEYS, "iodvs")
    v_wait = _num(v, "v_wait_v", "iodvs")
    if v_wait is None:
        raise ConfigError("iodvs.v_wait_v", "required")
    try:
        return IODVSPolicy(
            _num(v, "v_nominal_v", "iodvs", default=model.supply_voltage),
            v_wait,
            _num(v, "wait_current_scale", "iodvs", default=1.0),
            _num(v, "transition_energy_uj", "iodvs", default=0.0) / 1e6,
        )
    except ValueError as exc:
        raise ConfigError("iodvs", str(exc)) from None


def _overhead(d: dict) -> OverheadModel:
    _check_keys(d, _OVERHEAD_KEYS, "overhead")
    base = OverheadModel()
    comm = CommPower(
        _num(d, "comm_c_pf", "overhead", default=base.comm.c * 1e12) / 1e12,
        _num(d, "comm_f_mhz", "overhead", default=base.comm.f * 1e-6) * 1e6,
        _num(d, "comm_vdd_v", "overhead", default=base.comm.v_dd),
    )
    calibrated = d.get("calibrated", False)
    if not isinstance(calibrated, bool):
        raise ConfigError("overhead.calibrated", "expected true or false")
    try:
        return OverheadModel(
            _num(d, "p_mcu_w", "overhead", default=base.p_mcu),
            _num(d, "p_mcd_w", "overhead", default=base.p_mcd),
            _num(d, "p_match_w", "overhead", default=base.p_match),
            _num(d, "p_dev_w", "overhead", default=base.p_dev),
            comm,
            calibrated,
        )
    except ValueError as exc:
        raise ConfigError("overhead", str(exc)) from None


def _operations(v) -> tuple[tuple[str, int], ...] | None:
    if v is None:
        return None
    if not isinstance(v, list) or not v:
        raise ConfigError("operations", "expected a non-empty list of {name, count}")
    out = []
    for n, item in enumerate(v):
        where = f"operations[{n}]"
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigError(where, "expected a mapping with 'name' and optional 'count'")
        _check_keys(item, {"name", "count"}, where)
        out.append((str(item["name"]), _num(item, "count", where, default=1, kind=int)))
    return tuple(out)


def _drift(v) -> tuple[DriftStep, ...]:
    if v is None:
        return ()
    if not isinstance(v, list):
        raise ConfigError("drift", "expected a list of {at_trial, scale}")
    steps = []
    for n, item in enumerate(v):
        where = f"drift[{n}]"
        if not isinstance(item, dict):
            raise ConfigError(where, "expected a mapping")
        _check_keys(item, {"at_trial", "scale"}, where)
        at = _num(item, "at_trial", where, kind=int)
        scale = _num(item, "scale", where)
        if at is None or scale is None:
            raise ConfigError(where, "needs at_trial and scale")
        if at < 0:
            raise ConfigError(f"{where}.at_trial", "must be >= 0")
        if not scale > 0:
            raise ConfigError(f"{where}.scale", "must be > 0")
        steps.append(DriftStep(at, scale))
    return tuple(steps)


def config_from_dict(d: dict, base_dir: Path | None = None, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "expected a mapping")
    _check_keys(d, _TOP_KEYS, "")
    model = None
    if "device_file" in d:
        path = Path(d["device_file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            model = load_model(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError("device_file", str(exc)) from None
        device = model.name
    elif "device" in d:
        device = str(d["device"])
    else:
        raise ConfigError("device", "required (or give device_file)")

    trials = _section(d, "trials")
    _check_keys(trials, _TRIALS_KEYS, "trials")
    count = _num(trials, "count", "trials", default=50, kind=int)
    warmup = _num(trials, "warmup", "trials", default=min(20, max(count - 1, 0)), kind=int)

    if seed is None:
        seed = _num(d, "seed", "", default=2016, kind=int)

    cfg = ExperimentConfig(
        device=device,
        detector=_detector(_section(d, "detector")),
        operations=_operations(d.get("operations")),
        overhead=_overhead(_section(d, "overhead")),
        trials=count,
        warmup=warmup,
        seed=seed,
        drift=_drift(d.get("drift")),
        poll_period=_num(d, "poll_period_us", "", default=100.0) / 1e6,
        sample_period=_num(d, "sample_period_us", "", default=1.0) / 1e6,
        model=model,
    )
    iodvs = _iodvs(d.get("iodvs"), cfg.device_model())
    if iodvs is not None:
        cfg = replace(cfg, iodvs=iodvs)
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"{path} is not valid YAML: {exc}") from None
    return config_from_dict(d or {}, path.parent, seed)


def _clean(x: float) -> float:
    # drop unit-conversion noise so written configs read back identically
    return float(f"{x:.15g}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = cfg.detector
    out = {"device": cfg.device}
    if cfg.operations is not None:
        out["operations"] = [{"name": op, "count": n} for op, n in cfg.operations]
    det = {"kind": d.kind, "threshold_factor": d.threshold_factor, "resolution_us": _clean(d.resolution * 1e6),
           "widen_factor": d.widen_factor, "filter_window": d.filter_window}
    if d.min_latency is not None:
        det["min_latency_ms"] = _clean(d.min_latency * 1e3)
    if d.relax_after is not None:
        det["relax_after"] = d.relax_after
    out["detector"] = det
    if cfg.iodvs is not None:
        p = cfg.iodvs
        out["iodvs"] = {"v_nominal_v": p.v_nominal, "v_wait_v": p.v_wait,
                        "wait_current_scale": p.wait_current_scale,
                        "transition_energy_uj": _clean(p.transition_energy * 1e6)}
    o = cfg.overhead
    out["overhead"] = {"p_mcu_w": o.p_mcu, "p_mcd_w": o.p_mcd, "p_match_w": o.p_match, "p_dev_w": o.p_dev,
                       "comm_c_pf": _clean(o.comm.c * 1e12), "comm_f_mhz": _clean(o.comm.f * 1e-6),
                       "comm_vdd_v": o.comm.v_dd, "calibrated": o.calibrated}
    out["trials"] = {"count": cfg.trials, "warmup": cfg.warmup}
    out["seed"] = cfg.seed
    if cfg.drift:
        out["drift"] = [{"at_trial": s.at_trial, "scale": s.scale} for s in cfg.drift]
    out["poll_period_us"] = _clean(cfg.poll_period * 1e6)
    out["sample_period_us"] = _clean(cfg.sample_period * 1e6)
    return out
