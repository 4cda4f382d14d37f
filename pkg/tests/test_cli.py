import csv
import json
from pathlib import Path

import numpy as np
import pytest

from slackbench.cli import OUTPUT_ENV, analyze_trace, main
from slackbench.devices import get_model
from slackbench.trace import CurrentTrace, State, energy_integrate, read_trace_csv, write_trace_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def usage_code(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


# -- run ------------------------------------------------------------------------

def test_run_writes_report_table_and_figures(tmp_path, capsys):
    code, out, _ = run(["run", "--config", CONFIGS / "eeprom_pacer_t.cfg", "--output", tmp_path], capsys)
    assert code == 0
    assert "Wait" in out and "PACER-T" in out
    doc = json.loads((tmp_path / "eeprom_pacer_t.json").read_text())
    assert set(doc) == {"config", "control", "treatment", "treatment_iodvs", "diff"}
    wait = next(r for r in doc["diff"] if r["stage"] == "Wait" and r["quantity"] == "latency")
    assert wait["diff_pct"] == pytest.approx(30.5, abs=3)
    rows = list(csv.reader((tmp_path / "eeprom_pacer_t.csv").read_text().splitlines()))
    assert rows[0] == ["Stage", "Control", "PACER-T", "Diff", "PACER+IODVS", "Diff"]
    wait_row = next(r for r in rows if r[0] == "Wait")
    assert wait_row[1] == "5.05" and wait_row[3].endswith("%")
    for name in ("eeprom_pacer_t_stages.png", "eeprom_pacer_t_trials.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_run_is_byte_identical(tmp_path, capsys):
    cfg = CONFIGS / "hih6130_pacer_e.cfg"
    for d in ("a", "b"):
        assert run(["run", "--config", cfg, "--output", tmp_path / d], capsys)[0] == 0
    for name in ("hih6130_pacer_e.json", "hih6130_pacer_e.csv", "hih6130_pacer_e_stages.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_seed_override_changes_output(tmp_path, capsys):
    cfg = CONFIGS / "swissbit_pacer_c.cfg"
    run(["run", "--config", cfg, "--output", tmp_path / "a", "--no-figures"], capsys)
    run(["run", "--config", cfg, "--output", tmp_path / "b", "--no-figures", "--seed", "3"], capsys)
    a = json.loads((tmp_path / "a" / "swissbit_pacer_c.json").read_text())
    b = json.loads((tmp_path / "b" / "swissbit_pacer_c.json").read_text())
    assert a["config"]["seed"] == 2016 and b["config"]["seed"] == 3
    assert a["treatment"] != b["treatment"]
    assert not list((tmp_path / "a").glob("*.png"))


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    code, out, _ = run(["run", "--config", CONFIGS / "hih6130_pacer_e.cfg", "--no-figures", "--format", "json"],
                       capsys)
    assert code == 0
    assert (tmp_path / "env" / "hih6130_pacer_e.json").exists()
    assert isinstance(json.loads(out), list)


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("device: eeprom\ndetector: {kind: pacer_t, sped: 1}\n")
    code, _, err = run(["run", "--config", bad, "--output", tmp_path], capsys)
    assert code == 2 and "detector.sped" in err
    code, _, err = run(["run", "--config", tmp_path / "missing.cfg", "--output", tmp_path], capsys)
    assert code == 2


def test_usage_errors_exit_1(capsys):
    assert usage_code([]) == 1
    assert usage_code(["frobnicate"]) == 1
    assert usage_code(["run"]) == 1
    assert usage_code(["suite", "--trials", "many"]) == 1
    capsys.readouterr()


# -- devices and calibration -------------------------------------------------------

def test_list_devices(tmp_path, capsys):
    code, out, _ = run(["list-devices", "--format", "csv", "--export", "--output", tmp_path], capsys)
    assert code == 0
    names = [r[0] for r in csv.reader(out.splitlines()[1:])]
    assert "eeprom" in names and "sd_kingston" in names
    assert (tmp_path / "eeprom.yaml").exists()


def test_calibrate(capsys):
    code, out, _ = run(["calibrate", "eeprom", "--format", "json", "--assert"], capsys)
    assert code == 0
    rows = json.loads(out)
    assert {r["stage"] for r in rows} == {"wait_latency", "all_latency", "wait_energy", "all_energy"}
    assert all(r["status"] == "ok" for r in rows)


def test_calibrate_unknown_device_exits_2(capsys):
    code, _, err = run(["calibrate", "floppy"], capsys)
    assert code == 2 and "eeprom" in err


# -- traces -----------------------------------------------------------------------

def test_export_then_analyze_recovers_completion(tmp_path, capsys):
    path = tmp_path / "swissbit.csv"
    code, _, _ = run(["export-trace", "sd_swissbit", "--seed", "4", "--output", path], capsys)
    assert code == 0
    truth = json.loads(path.with_suffix(".truth.json").read_text())
    assert path.with_suffix(".png").exists()
    code, out, _ = run(["analyze", path, "--min-latency-ms", "0.5", "--format", "json"], capsys)
    assert code == 0
    res = json.loads(out)
    assert res["detection_origin_s"] == pytest.approx(truth["wait_start_s"])
    assert abs(res["detected_completion_s"] - truth["true_completion_s"]) <= 100e-6
    assert res["energy_total_j"] == pytest.approx(truth["energy_total_j"], rel=1e-9)
    for state, e in truth["energy_by_state_j"].items():
        assert res["energy_by_state_j"][state] == pytest.approx(e, rel=1e-9, abs=1e-18)


def test_export_with_explicit_delay(tmp_path, capsys):
    path = tmp_path / "e.csv"
    assert run(["export-trace", "eeprom", "--delay-ms", "4", "--no-figures", "--output", path], capsys)[0] == 0
    t = read_trace_csv(path)
    start, stop = t.state_span(State.WAIT)
    overhead = get_model("eeprom").operation("page_write").wait_overhead
    assert stop - start == round((4e-3 + overhead) / 1e-6)
    assert run(["export-trace", "eeprom", "--op", "erase", "--output", path], capsys)[0] == 1


def test_analyze_writes_json_and_figure(tmp_path, capsys):
    path = tmp_path / "n.csv"
    run(["export-trace", "hih6130", "--no-figures", "--output", path], capsys)
    code, out, _ = run(["analyze", path, "--min-latency-ms", "10", "--output", tmp_path / "res.json"], capsys)
    assert code == 0 and "detected completion" in out
    assert json.loads((tmp_path / "res.json").read_text())["detected_completion_s"] is not None
    assert (tmp_path / "res.png").exists()


def test_all_idle_trace_completes_at_min_latency():
    n = 2000
    t = CurrentTrace(np.full(n, 3.3), np.full(n, 1e-3), np.full(n, int(State.IDLE)))
    res = analyze_trace(t, min_latency=300e-6)
    assert res["detected_completion_s"] == pytest.approx(300e-6)
    assert res["energy_total_j"] == pytest.approx(energy_integrate(t), rel=1e-12)


def test_truncated_trace_reports_line(tmp_path, capsys):
    path = tmp_path / "t.csv"
    n = 10
    write_trace_csv(CurrentTrace(np.full(n, 3.3), np.full(n, 1e-3), np.zeros(n)), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:6]) + "\n" + lines[6].split(",")[0] + ",3.3\n")
    code, _, err = run(["analyze", path], capsys)
    assert code == 2 and "line 7" in err


def test_trace_without_idle_lead_needs_idle_current(tmp_path, capsys):
    path = tmp_path / "w.csv"
    n = 500
    write_trace_csv(CurrentTrace(np.full(n, 3.3), np.full(n, 2e-3), np.full(n, int(State.WAIT))), path)
    assert run(["analyze", path], capsys)[0] == 1
    code, out, _ = run(["analyze", path, "--idle-ma", "2.5", "--format", "json"], capsys)
    assert code == 0 and json.loads(out)["detected_completion_s"] == 0.0


# -- suite ------------------------------------------------------------------------

def test_suite_assert(tmp_path, capsys):
    code, out, _ = run(["suite", "--output", tmp_path, "--assert"], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["energy_claim_met"] and summary["latency_claim_met"]
    assert summary["verify_failures"] == 0
    for name in ("table1_eeprom", "table2_nor_flash", "table3_nand_flash", "table4_sd_cards", "table5_hih6130"):
        assert (tmp_path / f"{name}.csv").exists() and (tmp_path / f"{name}.png").exists()
    assert "max energy reduction" in out
