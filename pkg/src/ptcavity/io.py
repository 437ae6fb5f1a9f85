"""Run configuration, CSV tables and report bundles.

Config files are YAML.  Every dimensional key carries its unit as a suffix
(``_hz``, ``_rad_s``, ``_m``, ``_w``, ``_s`` ...); units are never inferred.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .errors import ConfigurationError, DataError
from .fitting import ResponseDataset
from .model import CavityConfig, CrystalConfig, MechanicalConfig, OperatingPoint, hz_to_rad
from .solver import SolverSettings

SCENARIOS = ("scan", "selflock", "probe", "synth", "fit", "sweep", "compare")

TIMESERIES_COLUMNS = ("time_s", "xi", "x_act_m", "x_th_m", "p_trans_norm")
DATASET_COLUMNS = ("freq_hz", "phase_deg")
DATASET_OPTIONAL = ("mag", "phase_sigma_deg")

_UNIT_SUFFIXES = (
    "_rad_s", "_hz", "_m_per_s", "_n_per_m", "_hz_per_w", "_per_m", "_per_k", "_j_per_k", "_k_per_w",
    "_w_per_m_k", "_kg_per_m3", "_j_per_kg_k", "_kg", "_g", "_deg", "_rad", "_khz", "_mhz", "_mw", "_w",
    "_nm", "_um", "_mm", "_cm", "_m", "_ms", "_us", "_s",
)

# key -> (kind, required); kinds: "pos" > 0, "nonneg" >= 0, "real", "int", "str", "bool", "list", "dict"
_SCHEMA = {
    "cavity": {
        "finesse": ("pos", True),
        "one_way_length_m": ("pos", True),
        "wavelength_m": ("pos", False),
        "carrier_angular_frequency_rad_s": ("pos", False),
    },
    "crystal": {
        "thermal_expansion_per_k": ("real", True),
        "absorption_coefficient_per_m": ("nonneg", True),
        "crystal_length_m": ("pos", True),
        "heat_capacity_j_per_k": ("pos", True),
        "thermal_resistance_k_per_w": ("pos", True),
        "thermal_conductivity_w_per_m_k": ("pos", False),
        "density_kg_per_m3": ("pos", False),
        "specific_heat_j_per_kg_k": ("pos", False),
        "beam_radius_m": ("pos", False),
    },
    "mechanics": {
        "effective_mass_kg": ("pos", True),
        "resonance_frequency_hz": ("pos", True),
        "quality_factor": ("pos", True),
    },
    "operating_point": {
        "input_power_w": ("nonneg", True),
        "stationary_detuning": ("real", True),
    },
    "solver": {
        "rtol": ("pos", False),
        "atol": ("pos", False),
        "max_step_s": ("pos", False),
        "sample_interval_s": ("pos", False),
    },
    "scan": {
        "input_power_w": ("nonneg", True),
        "velocity_m_per_s": ("real", True),
        "normalization": ("str", False),
        "scan_range": ("pos", False),
        "samples": ("int", False),
    },
    "selflock": {
        "input_power_w": ("nonneg", True),
        "heater_power_w": ("real", True),
        "heater_on_s": ("nonneg", True),
        "heater_off_s": ("pos", True),
        "t_end_s": ("pos", True),
        "actuator_bias_m": ("real", False),
    },
    "probe": {
        "operating_point": ("int", False),
        "amplitude_m": ("pos", True),
        "f_min_hz": ("pos", True),
        "f_max_hz": ("pos", True),
        "points": ("int", True),
    },
    "synth": {
        "model": ("str", True),
        "f_min_hz": ("pos", True),
        "f_max_hz": ("pos", True),
        "points": ("int", True),
        "phase_sigma_deg": ("nonneg", False),
        "operating_point": ("int", False),
        "absorption_rate_hz": ("real", False),
        "relaxation_rate_hz": ("pos", False),
        "optical_spring_frequency_hz": ("nonneg", False),
        "optical_spring_n_per_m": ("real", False),
    },
    "fit": {
        "pipeline": ("str", True),
        "f_min_hz": ("nonneg", False),
        "f_max_hz": ("pos", False),
        "relaxation_rate_hz": ("pos", False),
        "free_relaxation": ("bool", False),
        "fit_magnitude": ("bool", False),
    },
    "sweep": {
        "powers_w": ("list", False),
        "detunings": ("list", False),
        "detuning_sigma": ("nonneg", False),
        "f_min_hz": ("pos", False),
        "f_max_hz": ("pos", False),
        "points": ("int", False),
        "phase_sigma_deg": ("pos", False),
        "relaxation_rate_hz": ("pos", False),
        "datasets": ("list", False),
    },
    "dataset": {
        "path": ("str", True),
        "input_power_w": ("pos", True),
        "stationary_detuning": ("real", True),
        "stationary_detuning_sigma": ("nonneg", False),
    },
    "compare": {
        "relaxation_rate_hz": ("pos", True),
        "absorption_rate_max_hz_per_w": ("pos", True),
        "optical_spring_max_hz": ("pos", True),
        "reference_power_w": ("pos", False),
        "powers_w": ("list", False),
        "detunings": ("list", False),
        "fixed_band_hz": ("list", False),
        "suspended_band_hz": ("list", False),
        "points": ("int", False),
        "fixed_sigma_deg": ("pos", False),
        "suspended_sigma_deg": ("pos", False),
        "seeds": ("int", False),
    },
}

_TOP_LEVEL = {"cavity", "crystal", "mechanics", "operating_points", "solver", "rng_seed", *SCENARIOS}


def _strip_unit(key):
    for suffix in _UNIT_SUFFIXES:
        if key.endswith(suffix):
            return key[: -len(suffix)]
    return key


def _check_block(block, section, path):
    if not isinstance(block, dict):
        raise ConfigurationError("must be a mapping", path)
    schema = _SCHEMA[section]
    out = {}
    for key, value in block.items():
        kp = f"{path}.{key}"
        if key not in schema:
            base = _strip_unit(key)
            twins = [k for k in schema if _strip_unit(k) == base and k != key]
            if twins:
                raise ConfigurationError(f"unit mismatch, expected key {twins[0]!r}", kp)
            raise ConfigurationError("unknown key", kp)
        kind, _ = schema[key]
        out[key] = _convert(value, kind, kp)
    for key, (_, required) in schema.items():
        if required and key not in out:
            raise ConfigurationError("missing required key", f"{path}.{key}")
    return out


def _convert(value, kind, path):
    if kind in ("pos", "nonneg", "real"):
        if isinstance(value, bool):
            raise ConfigurationError("expected a number", path)
        try:
            x = float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"expected a number, got {value!r}", path) from None
        if not math.isfinite(x):
            raise ConfigurationError("must be finite", path)
        if kind == "pos" and not x > 0:
            raise ConfigurationError(f"must be > 0, got {x!r}", path)
        if kind == "nonneg" and x < 0:
            raise ConfigurationError(f"must be >= 0, got {x!r}", path)
        return x
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"expected an integer, got {value!r}", path)
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"expected a string, got {value!r}", path)
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"expected true/false, got {value!r}", path)
        return value
    if kind == "list":
        if not isinstance(value, list):
            raise ConfigurationError("expected a list", path)
        return value
    return value


def _number_list(values, path, positive=True):
    out = []
    for i, v in enumerate(values):
        out.append(_convert(v, "pos" if positive else "real", f"{path}[{i}]"))
    return out


@dataclass
class RunConfig:
    cavity: Optional[CavityConfig]
    crystal: Optional[CrystalConfig]
    mechanics: Optional[MechanicalConfig]
    operating_points: list
    scenario: str
    block: dict
    rng_seed: int
    solver: SolverSettings
    canonical: dict = field(repr=False, default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def config_hash(self):
        return config_hash(self.canonical)

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigurationError(f"scenario {self.scenario!r} needs a {name} section", name)


def config_hash(canonical):
    text = json.dumps(canonical, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config(raw, base_dir=".") -> RunConfig:
    """Validate a config mapping (as loaded from YAML) into a RunConfig."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    for key in raw:
        if key not in _TOP_LEVEL:
            raise ConfigurationError("unknown key", key)
    canonical = {}

    cavity = crystal = mechanics = None
    if "cavity" in raw:
        c = _check_block(raw["cavity"], "cavity", "cavity")
        has_wl = "wavelength_m" in c
        has_w0 = "carrier_angular_frequency_rad_s" in c
        if has_wl == has_w0:
            raise ConfigurationError(
                "give exactly one of wavelength_m or carrier_angular_frequency_rad_s", "cavity"
            )
        try:
            if has_wl:
                cavity = CavityConfig.from_wavelength(c["finesse"], c["one_way_length_m"], c["wavelength_m"])
            else:
                cavity = CavityConfig(c["finesse"], c["one_way_length_m"], c["carrier_angular_frequency_rad_s"])
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), "cavity") from None
        canonical["cavity"] = c
    if "crystal" in raw:
        c = _check_block(raw["crystal"], "crystal", "crystal")
        crystal = CrystalConfig(
            c["thermal_expansion_per_k"], c["absorption_coefficient_per_m"], c["crystal_length_m"],
            c["heat_capacity_j_per_k"], c["thermal_resistance_k_per_w"],
            c.get("thermal_conductivity_w_per_m_k"), c.get("density_kg_per_m3"),
            c.get("specific_heat_j_per_kg_k"), c.get("beam_radius_m"),
        )
        canonical["crystal"] = c
    if "mechanics" in raw:
        c = _check_block(raw["mechanics"], "mechanics", "mechanics")
        mechanics = MechanicalConfig(c["effective_mass_kg"], hz_to_rad(c["resonance_frequency_hz"]),
                                     c["quality_factor"])
        canonical["mechanics"] = c

    ops = []
    raw_ops = raw.get("operating_points", [])
    if not isinstance(raw_ops, list):
        raise ConfigurationError("expected a list", "operating_points")
    canonical_ops = []
    for i, entry in enumerate(raw_ops):
        c = _check_block(entry, "operating_point", f"operating_points[{i}]")
        ops.append(OperatingPoint(c["input_power_w"], c["stationary_detuning"]))
        canonical_ops.append(c)
    if canonical_ops:
        canonical["operating_points"] = canonical_ops

    solver_block = _check_block(raw.get("solver", {}) or {}, "solver", "solver")
    solver = SolverSettings(
        solver_block.get("rtol", 1e-8), solver_block.get("atol", 1e-10),
        solver_block.get("max_step_s"), solver_block.get("sample_interval_s"),
    )
    if solver_block:
        canonical["solver"] = solver_block

    present = [s for s in SCENARIOS if s in raw]
    if len(present) != 1:
        raise ConfigurationError(f"exactly one scenario block required, found {present or 'none'}")
    scenario = present[0]
    block = _check_block(raw[scenario] or {}, scenario, scenario)
    base_dir = Path(base_dir)
    _check_scenario(scenario, block, base_dir, len(ops))
    canonical[scenario] = block

    seed = raw.get("rng_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("must be a non-negative integer", "rng_seed")
    canonical["rng_seed"] = seed
    return RunConfig(cavity, crystal, mechanics, ops, scenario, block, seed, solver, canonical, base_dir)


def _check_scenario(scenario, block, base_dir, n_ops):
    if scenario in ("probe", "synth") and "operating_point" in block:
        if not 0 <= block["operating_point"] < max(n_ops, 1):
            raise ConfigurationError("operating point index out of range", f"{scenario}.operating_point")
    if scenario in ("probe", "synth") and block["f_min_hz"] >= block["f_max_hz"]:
        raise ConfigurationError("f_min_hz must be below f_max_hz", scenario)
    if scenario in ("probe", "synth") and block["points"] < 2:
        raise ConfigurationError("need at least 2 points", f"{scenario}.points")
    if scenario == "scan":
        if block["velocity_m_per_s"] == 0:
            raise ConfigurationError("must be non-zero", "scan.velocity_m_per_s")
        if block.get("normalization", "none") not in ("none", "figure1b"):
            raise ConfigurationError("must be 'none' or 'figure1b'", "scan.normalization")
    if scenario == "selflock":
        if not block["heater_on_s"] < block["heater_off_s"] <= block["t_end_s"]:
            raise ConfigurationError("need heater_on_s < heater_off_s <= t_end_s", "selflock")
    if scenario == "synth" and block["model"] not in ("cavity", "optomechanical"):
        raise ConfigurationError("must be 'cavity' or 'optomechanical'", "synth.model")
    if scenario == "fit" and block["pipeline"] not in ("A", "B"):
        raise ConfigurationError("must be 'A' or 'B'", "fit.pipeline")
    if scenario == "sweep":
        if "datasets" in block:
            checked = []
            for i, entry in enumerate(block["datasets"]):
                d = _check_block(entry, "dataset", f"sweep.datasets[{i}]")
                if not (base_dir / d["path"]).is_file():
                    raise ConfigurationError("file does not exist", f"sweep.datasets[{i}].path")
                checked.append(d)
            block["datasets"] = checked
        else:
            for key in ("powers_w", "detunings"):
                if key not in block:
                    raise ConfigurationError("required when no datasets are listed", f"sweep.{key}")
            block["powers_w"] = _number_list(block["powers_w"], "sweep.powers_w")
            block["detunings"] = _number_list(block["detunings"], "sweep.detunings")
    if scenario == "compare":
        for key in ("powers_w", "detunings"):
            if key in block:
                block[key] = _number_list(block[key], f"compare.{key}")
        for key in ("fixed_band_hz", "suspended_band_hz"):
            if key in block:
                band = _number_list(block[key], f"compare.{key}")
                if len(band) != 2 or band[0] >= band[1]:
                    raise ConfigurationError("expected [f_min, f_max]", f"compare.{key}")
                block[key] = band


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML: {exc}") from None
    return parse_config(raw, path.parent)


# --- files -----------------------------------------------------------------------------

def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_number(x):
    return "%.17g" % x


def write_table(path, columns: dict):
    """Write equal-length numeric columns as CSV with 17 significant digits."""
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=float) for n in names]
    n = len(arrays[0]) if arrays else 0
    if any(len(a) != n for a in arrays):
        raise ValueError("columns differ in length")
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for i in range(n):
        writer.writerow([format_number(a[i]) for a in arrays])
    atomic_write_text(path, buf.getvalue())


def read_table(path):
    """Read a headed numeric CSV into a dict of float arrays."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file, header row required")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    data = {h: [] for h in header}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for h, cell in zip(header, row):
            try:
                data[h].append(float(cell))
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {h!r} is not a number: {cell!r}") from None
    return {h: np.array(v, dtype=float) for h, v in data.items()}


def write_timeseries(path, series):
    write_table(path, series.columns())


def read_timeseries(path):
    table = read_table(path)
    missing = [c for c in TIMESERIES_COLUMNS if c not in table]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return table


def write_dataset(path, data: ResponseDataset):
    cols = {"freq_hz": data.freq_hz, "phase_deg": data.phase_deg}
    if data.magnitude is not None:
        cols["mag"] = data.magnitude
    if data.phase_sigma_deg is not None:
        cols["phase_sigma_deg"] = data.phase_sigma_deg
    write_table(path, cols)


def read_dataset(path, **known) -> ResponseDataset:
    table = read_table(path)
    missing = [c for c in DATASET_COLUMNS if c not in table]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    extra = [c for c in table if c not in DATASET_COLUMNS + DATASET_OPTIONAL]
    if extra:
        raise DataError(f"{path}: unexpected columns {extra}")
    return ResponseDataset(
        table["freq_hz"], table["phase_deg"], table.get("mag"), table.get("phase_sigma_deg"), **known
    )


# --- reports ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class ReportBundle:
    scenario: str
    results: dict
    config_hash: str
    seed: int
    status: str = "ok"
    files: dict = field(default_factory=dict)  # file name -> {column: unit}

    def provenance(self):
        return {"config_hash": self.config_hash, "seed": self.seed, "tool_version": __version__}

    def to_dict(self):
        return {
            "scenario": self.scenario,
            "status": self.status,
            "results": _jsonable(self.results),
            "provenance": self.provenance(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def manifest(self):
        return {
            name: {"columns": list(cols), "units": cols, "format": "csv"}
            for name, cols in self.files.items()
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "report.json", self.to_json())
        atomic_write_text(
            out_dir / "manifest.json", json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n"
        )
