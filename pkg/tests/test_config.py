from pathlib import Path

import pytest
import yaml

from slackbench.config import config_from_dict, config_to_dict, load_config
from slackbench.devices import get_model, save_model
from slackbench.harness import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_load_and_round_trip(path):
    cfg = load_config(path)
    again = config_from_dict(config_to_dict(cfg))
    assert config_to_dict(again) == config_to_dict(cfg)
    assert again.detector == cfg.detector and again.iodvs == cfg.iodvs and again.drift == cfg.drift


def test_defaults():
    cfg = config_from_dict({"device": "eeprom"})
    assert cfg.detector.kind == "control"
    assert (cfg.trials, cfg.warmup, cfg.seed) == (50, 20, 2016)
    assert cfg.poll_period == pytest.approx(100e-6)
    assert cfg.iodvs is None


def test_units_are_converted():
    cfg = config_from_dict({
        "device": "eeprom",
        "detector": {"kind": "pacer_c", "min_latency_ms": 1.5, "resolution_us": 20},
        "poll_period_us": 50,
        "iodvs": {"v_wait_v": 2.0, "transition_energy_uj": 3},
    })
    assert cfg.detector.min_latency == pytest.approx(1.5e-3)
    assert cfg.detector.resolution == pytest.approx(20e-6)
    assert cfg.poll_period == pytest.approx(50e-6)
    assert cfg.iodvs.v_nominal == get_model("eeprom").supply_voltage
    assert cfg.iodvs.transition_energy == pytest.approx(3e-6)


def test_seed_override():
    assert config_from_dict({"device": "eeprom", "seed": 5}, seed=9).seed == 9


def test_device_file_relative_to_config(tmp_path):
    save_model(get_model("hih6130"), tmp_path / "sensor.yaml")
    (tmp_path / "exp.cfg").write_text(yaml.safe_dump({"device_file": "sensor.yaml", "trials": {"count": 3}}))
    cfg = load_config(tmp_path / "exp.cfg")
    assert cfg.device == "hih6130" and cfg.model is not None
    assert cfg.warmup == 2


@pytest.mark.parametrize("doc,key", [
    ({"device": "eeprom", "colour": 1}, "colour"),
    ({"device": "eeprom", "detector": {"kind": "pacer_t", "speed": 2}}, "detector.speed"),
    ({"device": "eeprom", "detector": {"resolution_us": "fast"}}, "detector.resolution_us"),
    ({"device": "eeprom", "detector": {"relax_after": 2.5}}, "detector.relax_after"),
    ({"device": "eeprom", "detector": {"kind": "psychic"}}, "detector.kind"),
    ({"device": "eeprom", "trials": {"count": 0}}, "trials.count"),
    ({"device": "eeprom", "trials": {"count": 10, "warmup": 10}}, "trials.warmup"),
    ({"device": "eeprom", "trials": 5}, "trials"),
    ({"device": "eeprom", "iodvs": {"v_nominal_v": 3.3}}, "iodvs.v_wait_v"),
    ({"device": "eeprom", "iodvs": {"v_wait_v": 9.0}}, "iodvs"),
    ({"device": "eeprom", "overhead": {"p_mcu_w": -1}}, "overhead"),
    ({"device": "eeprom", "overhead": {"calibrated": "yes"}}, "overhead.calibrated"),
    ({"device": "eeprom", "drift": [{"at_trial": 3}]}, "drift[0]"),
    ({"device": "eeprom", "drift": [{"at_trial": 3, "scale": 0}]}, "drift[0].scale"),
    ({"device": "eeprom", "operations": [{"name": "erase"}]}, "operations"),
    ({"device": "eeprom", "operations": [{"count": 2}]}, "operations[0]"),
    ({"device": "floppy"}, "device"),
    ({}, "device"),
    ({"device": "sd_kingston", "iodvs": "default", "poll_period_us": 0}, "poll_period_us"),
])
def test_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(doc)
    assert exc.value.key == key
    assert key in str(exc.value)


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    bad = tmp_path / "bad.cfg"
    bad.write_text("device: [eeprom\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    worse = tmp_path / "worse.cfg"
    worse.write_text(yaml.safe_dump({"device_file": "nope.yaml"}))
    with pytest.raises(ConfigError) as exc:
        load_config(worse)
    assert exc.value.key == "device_file"
