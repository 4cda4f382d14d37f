"""Benchmark tables: which experiments make up each table, the reference
values they are checked against, and the summary across all of them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .devices import get_model
from .harness import (
    BenchmarkReport,
    DetectorConfig,
    ExperimentConfig,
    compare_reports,
    diff_pct,
    run_experiment,
)

# Published control/treatment means. Latency in ms, energy in uJ.
CONTROL_TARGETS = {
    "eeprom": {"wait_latency": 5.05, "all_latency": 5.98, "wait_energy": 46.84, "all_energy": 53.05},
    "nor_flash": {"wait_latency": 231.57, "all_latency": 243.87, "wait_energy": 2138.3, "all_energy": 2277.0},
    "nand_flash": {"wait_latency": 57.61, "all_latency": 71.28, "wait_energy": 1053.0, "all_energy": 1247.9},
    "sd_sandisk": {"all_energy": 17066},
    "sd_lexar": {"all_energy": 22707},
    "sd_swissbit": {"all_energy": 2763},
    "sd_kingston": {"all_energy": 942},
    "hih6130": {"wait_latency": 45.27, "all_latency": 45.99, "wait_energy": 325.95, "all_energy": 330.50},
}

CALIBRATION_TOLERANCE = 0.02

_UNIT = {"latency": 1e3, "energy": 1e6}


def to_display(stage_key: str, value: float) -> float:
    """Seconds to ms, joules to uJ."""
    return value * _UNIT[stage_key.split("_")[1]]


@dataclass(frozen=True)
class TableSpec:
    name: str
    title: str
    devices: tuple[str, ...]
    detector: str

    @property
    def energy_only(self) -> bool:
        return all(get_model(d).energy_only for d in self.devices)


TABLES = (
    TableSpec("table1_eeprom", "EEPROM page write", ("eeprom",), "pacer_t"),
    TableSpec("table2_nor_flash", "NOR serial flash erase and program", ("nor_flash",), "pacer_t"),
    TableSpec("table3_nand_flash", "NAND serial flash page program", ("nand_flash",), "pacer_t"),
    TableSpec("table4_sd_cards", "Micro-SD block writes",
              ("sd_sandisk", "sd_lexar", "sd_swissbit", "sd_kingston"), "pacer_c"),
    TableSpec("table5_hih6130", "Temperature/humidity sensor measurement", ("hih6130",), "pacer_e"),
)


@dataclass
class DeviceResult:
    """Control, detector, and detector+IODVS reports for one device."""

    device: str
    control: BenchmarkReport
    treatment: BenchmarkReport
    treatment_iodvs: BenchmarkReport | None = None

    def reports(self) -> list[BenchmarkReport]:
        return [r for r in (self.control, self.treatment, self.treatment_iodvs) if r is not None]

    def rows(self) -> list[dict]:
        out = []
        plain = compare_reports(self.treatment, self.control)
        scaled = compare_reports(self.treatment_iodvs, self.control) if self.treatment_iodvs else [None] * len(plain)
        for a, b in zip(plain, scaled):
            key = f"{a.stage.lower()}_{a.quantity}"
            row = {
                "device": self.device,
                "stage": a.stage,
                "quantity": a.quantity,
                "control": to_display(key, a.control),
                "treatment": to_display(key, a.treatment),
                "diff_pct": a.diff_pct,
            }
            if b is not None:
                row["treatment_iodvs"] = to_display(key, b.treatment)
                row["diff_iodvs_pct"] = b.diff_pct
            out.append(row)
        return out


@dataclass
class TableResult:
    spec: TableSpec
    devices: list[DeviceResult] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [r for d in self.devices for r in d.rows()]

    def device(self, name: str) -> DeviceResult:
        for d in self.devices:
            if d.device == name:
                return d
        raise KeyError(name)


def run_device(device: str, detector: str, *, seed: int = 2016, trials: int = 50, warmup: int = 20) -> DeviceResult:
    model = get_model(device)
    base = ExperimentConfig(device, trials=trials, warmup=warmup, seed=seed)
    control = run_experiment(base, keep_trials=False)
    cfg = replace(base, detector=DetectorConfig(detector))
    treatment = run_experiment(cfg, keep_trials=False)
    scaled = run_experiment(replace(cfg, iodvs=model.iodvs), keep_trials=False)
    return DeviceResult(device, control, treatment, scaled)


def run_with_control(cfg: ExperimentConfig, *, keep_trials: bool = True) -> DeviceResult:
    """Run ``cfg`` next to its control, and without IODVS when it has one."""
    control = run_experiment(replace(cfg, detector=DetectorConfig("control"), iodvs=None),
                             keep_trials=keep_trials)
    plain = run_experiment(replace(cfg, iodvs=None), keep_trials=keep_trials)
    scaled = run_experiment(cfg, keep_trials=keep_trials) if cfg.iodvs is not None else None
    return DeviceResult(cfg.device_model().name, control, plain, scaled)


def run_table(spec: TableSpec, **kw) -> TableResult:
    return TableResult(spec, [run_device(d, spec.detector, **kw) for d in spec.devices])


@dataclass
class SuiteSummary:
    max_energy_reduction: float
    max_energy_reduction_at: str
    max_all_latency_reduction: float
    max_all_latency_reduction_at: str
    verify_failures: int
    energy_claim: float = 75.0
    latency_claim: float = 62.0

    @property
    def energy_ok(self) -> bool:
        return self.max_energy_reduction >= self.energy_claim

    @property
    def latency_ok(self) -> bool:
        return self.max_all_latency_reduction >= self.latency_claim

    @property
    def ok(self) -> bool:
        return self.energy_ok and self.latency_ok and self.verify_failures == 0


def summarize(tables: list[TableResult]) -> SuiteSummary:
    best_e, best_e_at = float("-inf"), ""
    best_l, best_l_at = float("-inf"), ""
    failures = 0
    for t in tables:
        for d in t.devices:
            failures += sum(r.verify_failures for r in d.reports())
        for r in t.rows():
            for col, tag in (("diff_pct", ""), ("diff_iodvs_pct", "+iodvs")):
                if col not in r:
                    continue
                where = f"{r['device']} {r['stage']} {r['quantity']} {t.spec.detector}{tag}"
                if r["quantity"] == "energy" and r[col] > best_e:
                    best_e, best_e_at = r[col], where
                if r["quantity"] == "latency" and r["stage"] == "All" and r[col] > best_l:
                    best_l, best_l_at = r[col], where
    if best_l == float("-inf"):
        best_l = 0.0
    return SuiteSummary(best_e, best_e_at, best_l, best_l_at, failures)


@dataclass
class CalibrationRow:
    stage: str
    target: float
    measured: float

    @property
    def deviation(self) -> float:
        return (self.measured - self.target) / self.target

    @property
    def ok(self) -> bool:
        return abs(self.deviation) <= CALIBRATION_TOLERANCE


def calibrate(device: str, *, seed: int = 2016, trials: int = 50, warmup: int = 20) -> list[CalibrationRow]:
    """Compare a builtin model's control means against its reference column."""
    targets = CONTROL_TARGETS.get(device)
    if targets is None:
        get_model(device)  # raises with the list of known names
        raise KeyError(f"no reference values for device {device!r}")
    report = run_experiment(ExperimentConfig(device, trials=trials, warmup=warmup, seed=seed), keep_trials=False)
    return [CalibrationRow(stage, target, to_display(stage, report.mean(stage))) for stage, target in targets.items()]


__all__ = [
    "CONTROL_TARGETS",
    "TABLES",
    "CalibrationRow",
    "DeviceResult",
    "SuiteSummary",
    "TableResult",
    "TableSpec",
    "calibrate",
    "diff_pct",
    "run_device",
    "run_table",
    "run_with_control",
    "summarize",
    "to_display",
]
