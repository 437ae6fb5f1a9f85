import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from ptcavity import cli, io
from ptcavity.errors import ConfigurationError, DataError
from ptcavity.fitting import ResponseDataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = {
    "cavity": {"finesse": 100, "one_way_length_m": 0.215, "wavelength_m": 1.064e-6},
    "crystal": {
        "thermal_expansion_per_k": 1e-5, "absorption_coefficient_per_m": 0.26, "crystal_length_m": 0.01,
        "heat_capacity_j_per_k": 0.01, "thermal_resistance_k_per_w": 1.3,
    },
    "operating_points": [{"input_power_w": 0.6, "stationary_detuning": 0.5}],
    "scan": {"input_power_w": 0.6, "velocity_m_per_s": 2e-8},
}


def _with(base, path, value):
    cfg = json.loads(json.dumps(base))
    node = cfg
    *head, last = path
    for key in head:
        node = node[key]
    if value is KeyError:
        del node[last]
    else:
        node[last] = value
    return cfg


def _write(tmp_path, cfg, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


# --- configuration ---------------------------------------------------------------------

def test_minimal_config_parses(tmp_path):
    cfg = io.load_config(_write(tmp_path, MINIMAL))
    assert cfg.scenario == "scan"
    assert cfg.cavity.finesse == 100
    assert cfg.operating_points[0].stationary_detuning == 0.5
    assert cfg.rng_seed == 0


def test_hardware_config_decay_rate(tmp_path):
    cfg = _with(MINIMAL, ("mechanics",), {"effective_mass_kg": 2.8e-4, "resonance_frequency_hz": 14.2,
                                          "quality_factor": 193})
    cfg = io.load_config(_write(tmp_path, cfg))
    assert cfg.mechanics.resonance_angular_frequency == pytest.approx(2 * math.pi * 14.2)
    gamma = cfg.cavity.decay_rate
    assert gamma == pytest.approx(math.pi * 299792458.0 / (2 * 100 * 0.215), rel=1e-15)
    assert 1.1e7 / 2 <= gamma <= 1.1e7 * 2  # quoted ~1.1e7 rad/s; see notes on the length convention


def test_negative_heat_capacity_rejected_with_path():
    cfg = _with(MINIMAL, ("crystal", "heat_capacity_j_per_k"), -0.01)
    with pytest.raises(ConfigurationError) as err:
        io.parse_config(cfg)
    assert err.value.key_path == "crystal.heat_capacity_j_per_k"


@pytest.mark.parametrize("path,value,fragment", [
    (("crystal", "heat_capacty_j_per_k"), 0.01, "unknown key"),
    (("bogus",), 1, "unknown key"),
    (("cavity", "wavelength_nm"), 1064, "unit mismatch"),
    (("crystal", "crystal_length_mm"), 10, "unit mismatch"),
    (("operating_points", 0, "input_power_w"), "lots", "expected a number"),
    (("scan", "velocity_m_per_s"), 0, "non-zero"),
    (("rng_seed",), -1, "non-negative"),
])
def test_config_diagnostics(path, value, fragment):
    cfg = _with(MINIMAL, path, value)
    with pytest.raises(ConfigurationError, match=fragment):
        io.parse_config(cfg)


def test_resonance_frequency_in_rad_s_is_a_unit_mismatch():
    cfg = _with(MINIMAL, ("mechanics",), {"effective_mass_kg": 1e-3, "resonance_frequency_rad_s": 90,
                                          "quality_factor": 10})
    with pytest.raises(ConfigurationError, match="unit mismatch") as err:
        io.parse_config(cfg)
    assert err.value.key_path == "mechanics.resonance_frequency_rad_s"


def test_missing_required_key():
    with pytest.raises(ConfigurationError, match="missing required key") as err:
        io.parse_config(_with(MINIMAL, ("crystal", "crystal_length_m"), KeyError))
    assert err.value.key_path == "crystal.crystal_length_m"


def test_exactly_one_scenario():
    with pytest.raises(ConfigurationError, match="exactly one scenario"):
        io.parse_config(_with(MINIMAL, ("scan",), KeyError))
    two = _with(MINIMAL, ("selflock",), {"input_power_w": 0.6, "heater_power_w": 1e-3, "heater_on_s": 1,
                                         "heater_off_s": 2, "t_end_s": 3})
    with pytest.raises(ConfigurationError, match="exactly one scenario"):
        io.parse_config(two)


def test_wavelength_or_carrier_exclusive():
    both = _with(MINIMAL, ("cavity", "carrier_angular_frequency_rad_s"), 1.77e15)
    with pytest.raises(ConfigurationError):
        io.parse_config(both)


def test_referenced_files_must_exist(tmp_path):
    cfg = {
        "crystal": MINIMAL["crystal"],
        "sweep": {"datasets": [{"path": "nope.csv", "input_power_w": 0.6, "stationary_detuning": 0.5}]},
    }
    with pytest.raises(ConfigurationError, match="does not exist") as err:
        io.load_config(_write(tmp_path, cfg))
    assert err.value.key_path == "sweep.datasets[0].path"


def test_all_example_configs_load():
    paths = sorted(CONFIGS.glob("*.yaml"))
    assert len(paths) >= 7
    for path in paths:
        io.load_config(path)


# --- hashing -----------------------------------------------------------------------------------

def test_config_hash_ignores_formatting(tmp_path):
    a = io.load_config(_write(tmp_path, MINIMAL, "a.yaml"))
    text = "# comment\n" + yaml.safe_dump(MINIMAL, sort_keys=False, default_flow_style=True)
    text = text.replace("1.0e-05", "0.00001")
    (tmp_path / "b.yaml").write_text(text)
    b = io.load_config(tmp_path / "b.yaml")
    assert a.config_hash == b.config_hash


@pytest.mark.parametrize("path,value", [
    (("crystal", "heat_capacity_j_per_k"), 0.011),
    (("scan", "velocity_m_per_s"), -2e-8),
    (("operating_points", 0, "stationary_detuning"), 0.5000001),
    (("rng_seed",), 4),
    (("scan", "samples"), 1001),
])
def test_config_hash_changes_with_semantic_fields(path, value):
    base = io.parse_config(MINIMAL).config_hash
    assert io.parse_config(_with(MINIMAL, path, value)).config_hash != base


# --- CSV ---------------------------------------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False)


@settings(max_examples=60)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=20))
def test_csv_round_trip_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    a = np.array([r[0] for r in rows])
    b = np.array([r[1] for r in rows])
    io.write_table(path, {"a": a, "b": b})
    back = io.read_table(path)
    # 17 significant digits round-trip binary64 exactly
    assert back["a"].tobytes() == a.tobytes()
    assert back["b"].tobytes() == b.tobytes()


def test_dataset_round_trip(tmp_path):
    f = np.geomspace(5, 500, 30)
    d = ResponseDataset(f, -np.linspace(10, 190, 30) / 3, np.linspace(1, 2, 30), np.full(30, 0.7))
    io.write_dataset(tmp_path / "d.csv", d)
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "freq_hz,phase_deg,mag,phase_sigma_deg"
    back = io.read_dataset(tmp_path / "d.csv")
    for name in ("freq_hz", "phase_deg", "magnitude", "phase_sigma_deg"):
        assert getattr(back, name).tobytes() == getattr(d, name).tobytes()


def test_dataset_schema_errors(tmp_path):
    (tmp_path / "a.csv").write_text("")
    with pytest.raises(DataError, match="header"):
        io.read_dataset(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("freq_hz,mag\n1,1\n")
    with pytest.raises(DataError, match="missing"):
        io.read_dataset(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text("freq_hz,phase_deg\n1,x\n")
    with pytest.raises(DataError, match="not a number"):
        io.read_dataset(tmp_path / "c.csv")
    (tmp_path / "d.csv").write_text("freq_hz,phase_deg\n2,1\n1,1\n")
    with pytest.raises(DataError, match="increasing"):
        io.read_dataset(tmp_path / "d.csv")
    (tmp_path / "e.csv").write_text("freq_hz,phase_deg,extra\n1,1,1\n")
    with pytest.raises(DataError, match="unexpected"):
        io.read_dataset(tmp_path / "e.csv")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.atomic_write_text(tmp_path / "x.txt", "hello")
    io.atomic_write_text(tmp_path / "x.txt", "again")
    assert (tmp_path / "x.txt").read_text() == "again"
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]


# --- CLI -----------------------------------------------------------------------------------------------

def _run(command, config, out, *extra):
    return cli.main([command, "--config", str(config), "--out", str(out), *extra])


def test_cli_synth_fit_round_trip(tmp_path):
    assert _run("synth", CONFIGS / "synth_suspended.yaml", tmp_path / "s") == 0
    report = json.loads((tmp_path / "s" / "report.json").read_text())
    truth = report["results"]["truth"]
    assert _run("fit", CONFIGS / "fit_suspended.yaml", tmp_path / "f", "--data", str(tmp_path / "s" / "dataset.csv")) == 0
    fit = json.loads((tmp_path / "f" / "report.json").read_text())["results"]["fit"]
    for name in ("k_opt", "omega_th"):
        assert abs(fit["estimates"][name] - truth[name]) < 3 * fit["standard_errors"][name]
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert manifest["fit_residuals.csv"]["columns"][0] == "freq_hz"


def test_cli_synth_zero_noise_equals_model(tmp_path):
    cfg = yaml.safe_load((CONFIGS / "synth_fixed.yaml").read_text())
    cfg["synth"]["phase_sigma_deg"] = 0.0
    path = _write(tmp_path, cfg)
    assert _run("synth", path, tmp_path / "o") == 0
    d = io.read_dataset(tmp_path / "o" / "dataset.csv")
    w, g = 2 * np.pi * 51.7, 2 * np.pi * 12.0
    s = 1j * d.omega
    np.testing.assert_allclose(d.phase_deg, np.degrees(np.angle((g + s) / (w + g + s))), atol=1e-12)


def test_cli_determinism(tmp_path):
    for name in ("a", "b"):
        assert _run("synth", CONFIGS / "synth_fixed.yaml", tmp_path / name, "--seed", "17") == 0
    for f in ("dataset.csv", "report.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert _run("synth", CONFIGS / "synth_fixed.yaml", tmp_path / "c", "--seed", "18") == 0
    assert (tmp_path / "a" / "dataset.csv").read_bytes() != (tmp_path / "c" / "dataset.csv").read_bytes()
    prov = json.loads((tmp_path / "a" / "report.json").read_text())["provenance"]
    assert prov["seed"] == 17 and len(prov["config_hash"]) == 64 and prov["tool_version"]


def test_cli_selflock_four_phase(tmp_path):
    assert _run("selflock", CONFIGS / "selflock.yaml", tmp_path) == 0
    res = json.loads((tmp_path / "report.json").read_text())["results"]
    assert res["locked"] and res["stability_slope"] < 0
    ts = io.read_timeseries(tmp_path / "timeseries.csv")
    assert list(ts) == list(io.TIMESERIES_COLUMNS)
    assert ts["p_trans_norm"][0] < 0.25 and ts["p_trans_norm"][-1] > 0.7


def test_cli_scan_without_expansion_symmetric(tmp_path):
    cfg = yaml.safe_load((CONFIGS / "scan.yaml").read_text())
    cfg["crystal"]["thermal_expansion_per_k"] = 0.0
    cfg["scan"]["samples"] = 2001
    assert _run("scan", _write(tmp_path, cfg), tmp_path / "o") == 0
    p = io.read_timeseries(tmp_path / "o" / "timeseries.csv")["p_trans_norm"]
    np.testing.assert_allclose(p, p[::-1], atol=1e-7)


def test_cli_probe_matches_model(tmp_path):
    cfg = yaml.safe_load((CONFIGS / "probe.yaml").read_text())
    cfg["probe"]["points"] = 6
    assert _run("probe", _write(tmp_path, cfg), tmp_path / "o") == 0
    measured = io.read_table(tmp_path / "o" / "probe.csv")
    expected = io.read_table(tmp_path / "o" / "probe_model.csv")
    np.testing.assert_allclose(measured["mag"], expected["mag"], rtol=1e-2)
    np.testing.assert_allclose(measured["phase_deg"], expected["phase_deg"], atol=1.0)


def test_cli_sweep_slope_report(tmp_path):
    assert _run("sweep", CONFIGS / "sweep.yaml", tmp_path) == 0
    res = json.loads((tmp_path / "report.json").read_text())["results"]
    slopes = res["zero_intercept_slopes"]
    assert set(slopes) == {"k_opt", "omega_th"}
    maxima = io.read_table(tmp_path / "sweep_maxima.csv")
    np.testing.assert_array_equal(maxima["input_power_w"], [0.15, 0.3, 0.6])


def test_cli_exit_codes(tmp_path):
    bad = _write(tmp_path, _with(MINIMAL, ("crystal", "heat_capacity_j_per_k"), -1), "bad.yaml")
    assert _run("scan", bad, tmp_path / "o") == cli.EXIT_CONFIG
    # scenario block does not match the subcommand
    assert _run("selflock", _write(tmp_path, MINIMAL), tmp_path / "o") == cli.EXIT_CONFIG
    # malformed dataset
    (tmp_path / "broken.csv").write_text("freq_hz,phase_deg\n1,abc\n")
    assert _run("fit", CONFIGS / "fit_fixed.yaml", tmp_path / "o", "--data", str(tmp_path / "broken.csv")) \
        == cli.EXIT_DATA
    # probe amplitude violating the linearity guard is a configuration problem
    cfg = yaml.safe_load((CONFIGS / "probe.yaml").read_text())
    cfg["probe"]["amplitude_m"] = 1e-9
    assert _run("probe", _write(tmp_path, cfg, "p.yaml"), tmp_path / "o") == cli.EXIT_CONFIG


def test_cli_non_identifiable_exit_status(tmp_path):
    f = np.geomspace(15, 1000, 40)
    io.write_table(tmp_path / "flat.csv", {"freq_hz": f, "phase_deg": np.zeros_like(f)})
    code = _run("fit", CONFIGS / "fit_fixed.yaml", tmp_path / "o", "--data", str(tmp_path / "flat.csv"))
    assert code == cli.EXIT_FIT
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] in ("non-identifiable", "non-converged")


def test_cli_numerical_failure_exit(tmp_path):
    cfg = yaml.safe_load((CONFIGS / "scan.yaml").read_text())
    cfg["solver"] = {"rtol": 1e-8}
    cfg["scan"]["samples"] = 11
    path = _write(tmp_path, cfg)
    from ptcavity import dynamics
    from ptcavity.errors import IntegrationError

    def boom(*a, **k):
        raise IntegrationError("step size underflow", 1.25)

    orig = dynamics.simulate_scan
    dynamics.simulate_scan = boom
    try:
        assert _run("scan", path, tmp_path / "o") == cli.EXIT_NUMERIC
    finally:
        dynamics.simulate_scan = orig
