"""Command-line entry point: ``ptcavity <scenario> --config run.yaml --out dir``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, dynamics, estimation, model
from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    IntegrationError,
    LinearityGuardError,
    SingularityError,
)
from .io import (
    SCENARIOS,
    ReportBundle,
    RunConfig,
    load_config,
    read_dataset,
    write_dataset,
    write_table,
    write_timeseries,
)
from .model import OperatingPoint, hz_to_rad

log = logging.getLogger("ptcavity")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_FIT = 4
EXIT_NUMERIC = 5

_TS_UNITS = {"time_s": "s", "xi": "1", "x_act_m": "m", "x_th_m": "m", "p_trans_norm": "1"}
_DS_UNITS = {"freq_hz": "Hz", "phase_deg": "deg", "mag": "1", "phase_sigma_deg": "deg"}


def _fit_dict(fit):
    return {
        "estimates": dict(fit.estimates),
        "standard_errors": dict(fit.standard_errors),
        "units": dict(fit.units),
        "converged": fit.converged,
        "identifiable": fit.identifiable,
        "iterations": fit.iterations,
        "objective": fit.objective,
        "rmse": fit.rmse,
        "message": fit.message,
    }


def _fit_status(fit):
    if not fit.converged:
        return "non-converged"
    if not fit.identifiable:
        return "non-identifiable"
    return "ok"


def _bundle(cfg, results, files, status="ok"):
    return ReportBundle(cfg.scenario, results, cfg.config_hash, cfg.rng_seed, status, files)


def _op(cfg, index=0):
    if not cfg.operating_points:
        raise ConfigurationError("at least one operating point is required", "operating_points")
    return cfg.operating_points[index]


# --- scenarios -----------------------------------------------------------------------

def cmd_scan(cfg: RunConfig, out: Path):
    cfg.require("cavity", "crystal")
    b = cfg.block
    series = dynamics.simulate_scan(
        cfg.cavity, cfg.crystal, b["input_power_w"], b["velocity_m_per_s"],
        normalization=b.get("normalization", "none"), scan_range=b.get("scan_range"),
        solver=cfg.solver, samples=b.get("samples", 20001),
    )
    write_timeseries(out / "timeseries.csv", series)
    f = dynamics.scan_features(series)
    results = {
        "peak_power": f.peak_power, "peak_time": f.peak_time,
        "half_max_width": f.half_max_width, "time_to_resonance": f.time_to_resonance,
        "resonance_time_s": series.metadata["resonance_time"], "scan_range": series.metadata["scan_range"],
        "normalization": b.get("normalization", "none"),
    }
    units = dict(_TS_UNITS)
    if b.get("normalization") == "figure1b":
        units["time_s"] = "photothermal-free half-widths from the unheated resonance"
    return _bundle(cfg, results, {"timeseries.csv": units})


def cmd_selflock(cfg: RunConfig, out: Path):
    cfg.require("cavity", "crystal")
    b = cfg.block
    heater = dynamics.DriveProfile.heater_step(
        b["heater_power_w"], b["heater_on_s"], b["heater_off_s"], bias=b.get("actuator_bias_m", 0.0)
    )
    res = dynamics.simulate_selflock(cfg.cavity, cfg.crystal, b["input_power_w"], heater,
                                     (0.0, b["t_end_s"]), cfg.solver)
    write_timeseries(out / "timeseries.csv", res.series)
    results = {
        "pre_heating_xi": res.pre_heating_xi, "final_xi": res.final_xi,
        "equilibria": res.equilibria, "equilibrium_xi": res.equilibrium_xi,
        "stability_slope": res.stability_slope, "locked": res.locked, "lock_time_s": res.lock_time,
    }
    return _bundle(cfg, results, {"timeseries.csv": _TS_UNITS})


def cmd_probe(cfg: RunConfig, out: Path):
    cfg.require("cavity", "crystal")
    b = cfg.block
    op = _op(cfg, b.get("operating_point", 0))
    freq = estimation.log_grid(b["f_min_hz"], b["f_max_hz"], b["points"])
    omega = hz_to_rad(freq)
    measured = dynamics.probe_sweep(cfg.cavity, cfg.crystal, op, omega, b["amplitude_m"], cfg.solver)
    rates = model.photothermal_rates(cfg.cavity, cfg.crystal, op)
    expected = model.cavity_optical_response(rates, omega)
    write_table(out / "probe.csv", {"freq_hz": freq, "phase_deg": measured.phase_deg,
                                    "mag": np.abs(measured.values)})
    write_table(out / "probe_model.csv", {"freq_hz": freq, "phase_deg": np.degrees(np.angle(expected)),
                                          "mag": np.abs(expected)})
    mag_err = np.abs(np.abs(measured.values) / np.abs(expected) - 1.0)
    ph_err = np.abs(np.degrees(np.angle(measured.values / expected)))
    results = {
        "omega_th_rad_s": rates.absorption_rate, "gamma_th_rad_s": rates.relaxation_rate,
        "max_relative_magnitude_error": float(mag_err.max()), "max_phase_error_deg": float(ph_err.max()),
    }
    return _bundle(cfg, results, {"probe.csv": _DS_UNITS, "probe_model.csv": _DS_UNITS})


def _synth_truth(cfg: RunConfig):
    b = cfg.block
    op = cfg.operating_points[b.get("operating_point", 0)] if cfg.operating_points else None
    rates = None
    if cfg.cavity is not None and cfg.crystal is not None and op is not None:
        rates = model.photothermal_rates(cfg.cavity, cfg.crystal, op)
    w = hz_to_rad(b["absorption_rate_hz"]) if "absorption_rate_hz" in b else (rates and rates.absorption_rate)
    g = hz_to_rad(b["relaxation_rate_hz"]) if "relaxation_rate_hz" in b else (rates and rates.relaxation_rate)
    if w is None or g is None:
        raise ConfigurationError("give the rates explicitly or cavity, crystal and an operating point", "synth")
    if b["model"] == "cavity":
        return estimation.CavityResponseModel(), [w, g], {}
    cfg.require("mechanics")
    if "optical_spring_n_per_m" in b:
        k = b["optical_spring_n_per_m"]
    elif "optical_spring_frequency_hz" in b:
        k = cfg.mechanics.effective_mass * hz_to_rad(b["optical_spring_frequency_hz"]) ** 2
    elif cfg.cavity is not None and op is not None:
        k = model.optical_spring_constant(cfg.cavity, op)
    else:
        raise ConfigurationError("optical spring not specified", "synth")
    return estimation.OptomechanicalResponseModel(cfg.mechanics, g), [k, w], {"gamma_th": g}


def cmd_synth(cfg: RunConfig, out: Path):
    b = cfg.block
    m, theta, known = _synth_truth(cfg)
    freq = estimation.log_grid(b["f_min_hz"], b["f_max_hz"], b["points"])
    rng = np.random.default_rng(cfg.rng_seed)
    data = estimation.synthesize(m, theta, freq, b.get("phase_sigma_deg", 0.0), rng)
    write_dataset(out / "dataset.csv", data)
    truth = dict(data.metadata["truth"])
    truth.update(known)
    cols = {c: _DS_UNITS[c] for c in ("freq_hz", "phase_deg", "mag")}
    if data.phase_sigma_deg is not None:
        cols["phase_sigma_deg"] = "deg"
    results = {"model": b["model"], "truth": truth, "units": "rad/s for rates, N/m for k_opt"}
    return _bundle(cfg, results, {"dataset.csv": cols})


def _relaxation_rate(cfg: RunConfig, required):
    if "relaxation_rate_hz" in cfg.block:
        return hz_to_rad(cfg.block["relaxation_rate_hz"])
    if cfg.crystal is not None and required:
        return cfg.crystal.relaxation_rate
    if required:
        raise ConfigurationError("relaxation rate needed (relaxation_rate_hz or crystal section)", cfg.scenario)
    return None


def _fit_band(b):
    lo = b.get("f_min_hz", estimation.DEFAULT_F_MIN_HZ if b["pipeline"] == "A" else 0.0)
    return lo, b.get("f_max_hz", math.inf)


def _run_fit(cfg: RunConfig, data):
    b = cfg.block
    if b["pipeline"] == "A":
        g = _relaxation_rate(cfg, required=False)
        return estimation.fit_cavity_response(data, f_min=data.band[0], gamma_th=g,
                                              fit_magnitude=b.get("fit_magnitude", False))
    cfg.require("mechanics")
    g = _relaxation_rate(cfg, required=True)
    return estimation.fit_optomechanical_response(
        data, cfg.mechanics, g, free_gamma=b.get("free_relaxation", False),
        fit_magnitude=b.get("fit_magnitude", False),
    )


def cmd_fit(cfg: RunConfig, out: Path, data_path):
    b = cfg.block
    data = read_dataset(data_path).in_band(_fit_band(b))
    if len(data) < 4:
        raise DataError(f"only {len(data)} points inside the fit band")
    if b.get("fit_magnitude") and data.magnitude is None:
        raise DataError("fit_magnitude needs a mag column")
    fit = _run_fit(cfg, data)
    resid = fit.residuals[: len(data)]
    write_table(out / "fit_residuals.csv", {
        "freq_hz": data.freq_hz, "phase_deg": data.phase_deg,
        "model_phase_deg": data.phase_deg + resid, "residual_deg": resid,
    })
    results = {"pipeline": b["pipeline"], "fit": _fit_dict(fit), "band_hz": list(data.band),
               "points": len(data)}
    return _bundle(cfg, results, {"fit_residuals.csv": {
        "freq_hz": "Hz", "phase_deg": "deg", "model_phase_deg": "deg", "residual_deg": "deg"}},
        _fit_status(fit))


def cmd_sweep(cfg: RunConfig, out: Path):
    """Detuning sweeps at several powers, peak values per power, and the
    zero-intercept slope of the peaks against input power."""
    b = cfg.block
    suspended = cfg.mechanics is not None
    g = _relaxation_rate(cfg, required=True)
    rng = np.random.default_rng(cfg.rng_seed)
    sweeps = {}
    if "datasets" in b:
        for d in b["datasets"]:
            data = read_dataset(cfg.base_dir / d["path"])
            if suspended:
                fit = estimation.fit_optomechanical_response(data.in_band(_band(b)), cfg.mechanics, g)
            else:
                fit = estimation.fit_cavity_response(data, f_min=b.get("f_min_hz", 15.0), gamma_th=g)
            sw = sweeps.setdefault(d["input_power_w"], estimation.DetuningSweep(d["input_power_w"]))
            sw.add(d["stationary_detuning"], fit, d.get("stationary_detuning_sigma", 0.0))
    else:
        cfg.require("cavity", "crystal")
        freq = estimation.log_grid(b.get("f_min_hz", 5.0 if suspended else 15.0),
                                   b.get("f_max_hz", 500.0 if suspended else 1000.0), b.get("points", 60))
        sigma = b.get("phase_sigma_deg", 1.0)
        xi_sigma = b.get("detuning_sigma", 0.0)
        cav_model = estimation.CavityResponseModel(g)
        om_model = estimation.OptomechanicalResponseModel(cfg.mechanics, g) if suspended else None
        for p in b["powers_w"]:
            sw = sweeps.setdefault(p, estimation.DetuningSweep(p))
            for xi in b["detunings"]:
                op = OperatingPoint(p, xi)
                w = model.photothermal_rates(cfg.cavity, cfg.crystal, op).absorption_rate
                xi_meas = xi + (rng.normal(0.0, xi_sigma) if xi_sigma > 0 else 0.0)
                if suspended:
                    k = model.optical_spring_constant(cfg.cavity, op)
                    data = estimation.synthesize(om_model, [k, w], freq, sigma, rng)
                    fit = estimation.fit_optomechanical_response(data, cfg.mechanics, g)
                else:
                    data = estimation.synthesize(cav_model, [w], freq, sigma, rng)
                    fit = estimation.fit_cavity_response(data, gamma_th=g, f_min=freq[0])
                sw.add(xi_meas, fit, xi_sigma)

    which = ("omega_th", "k_opt") if suspended else ("omega_th",)
    points_rows = {"input_power_w": [], "xi0": [], "xi0_sigma": []}
    for q in which:
        points_rows[q] = []
        points_rows[q + "_stderr"] = []
    maxima = {q: [] for q in which}
    excluded = 0
    for p in sorted(sweeps):
        sw = sweeps[p]
        excluded += len(sw.excluded)
        for e in sw.entries:
            points_rows["input_power_w"].append(p)
            points_rows["xi0"].append(e.xi0)
            points_rows["xi0_sigma"].append(e.xi0_sigma)
            for q in which:
                points_rows[q].append(e.fit.estimates[q])
                points_rows[q + "_stderr"].append(e.fit.standard_errors[q])
        for q in which:
            try:
                m, s = estimation.fit_detuning_curve(sw, q)
            except ValueError as exc:
                raise DataError(f"power {p} W: {exc}") from None
            maxima[q].append((p, m, s))
    slopes = {}
    for q in which:
        if len(maxima[q]) >= 2:
            slope, se = estimation.fit_linear_zero_intercept(maxima[q])
            slopes[q] = {"slope_per_w": slope, "stderr": se}
    write_table(out / "sweep_points.csv", points_rows)
    max_cols = {"input_power_w": [m[0] for m in maxima[which[0]]]}
    for q in which:
        max_cols[q + "_max"] = [m[1] for m in maxima[q]]
        max_cols[q + "_max_stderr"] = [m[2] for m in maxima[q]]
    write_table(out / "sweep_maxima.csv", max_cols)
    unit = {"omega_th": "rad/s", "k_opt": "N/m"}
    results = {
        "pipeline": "B" if suspended else "A",
        "maxima": {q: [{"input_power_w": p, "value": m, "stderr": s} for p, m, s in maxima[q]] for q in which},
        "zero_intercept_slopes": slopes,
        "units": {q: unit[q] for q in which},
        "excluded_fits": excluded,
    }
    files = {
        "sweep_points.csv": {c: ("W" if c == "input_power_w" else unit.get(c.split("_stderr")[0], "1"))
                             for c in points_rows},
        "sweep_maxima.csv": {c: ("W" if c == "input_power_w" else unit[c.split("_max")[0]]) for c in max_cols},
    }
    return _bundle(cfg, results, files, "ok" if excluded == 0 else "partial")


def _band(b):
    return (b.get("f_min_hz", 0.0), b.get("f_max_hz", math.inf))


def cmd_compare(cfg: RunConfig, out: Path):
    cfg.require("mechanics")
    b = cfg.block
    ref = b.get("reference_power_w", 0.6)
    g = hz_to_rad(b["relaxation_rate_hz"])
    kw = {}
    for key, name in (("powers_w", "powers"), ("detunings", "detunings"), ("fixed_band_hz", "fixed_band_hz"),
                      ("suspended_band_hz", "suspended_band_hz"), ("points", "points"),
                      ("fixed_sigma_deg", "fixed_sigma_deg"), ("suspended_sigma_deg", "suspended_sigma_deg")):
        if key in b:
            kw[name] = tuple(b[key]) if isinstance(b[key], list) else b[key]
    k_max = cfg.mechanics.effective_mass * hz_to_rad(b["optical_spring_max_hz"]) ** 2
    regime = estimation.ComparisonRegime(
        cfg.mechanics, g, hz_to_rad(b["absorption_rate_max_hz_per_w"]), k_max / ref, **kw
    )
    report = estimation.method_comparison(regime, b.get("seeds", 200), base_seed=cfg.rng_seed)
    n_s, n_p = report.fixed_rmse.shape
    write_table(out / "compare_rmse.csv", {
        "seed": np.repeat(report.seeds, n_p),
        "input_power_w": np.tile(report.powers, n_s),
        "fixed_nrmse": report.fixed_rmse.ravel(),
        "suspended_nrmse": report.suspended_rmse.ravel(),
    })
    files = {"compare_rmse.csv": {"seed": "1", "input_power_w": "W", "fixed_nrmse": "1", "suspended_nrmse": "1"}}
    return _bundle(cfg, report.to_dict(), files, "ok" if report.reliable else "unreliable")


COMMANDS = {
    "scan": cmd_scan,
    "selflock": cmd_selflock,
    "probe": cmd_probe,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


# --- entry point --------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="ptcavity", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SCENARIOS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override rng_seed (unsigned 64-bit)")
        p.add_argument("--format", choices=["csv"], default="csv", help="table format")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fit":
            p.add_argument("--data", required=True, type=Path, help="ResponseDataset CSV")
    return parser


def run(args):
    cfg = load_config(args.config)
    if cfg.scenario != args.command:
        raise ConfigurationError(
            f"config holds a {cfg.scenario!r} block but the {args.command!r} command was given"
        )
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer", "--seed")
        cfg.rng_seed = args.seed
        cfg.canonical["rng_seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "fit":
        bundle = cmd_fit(cfg, out, args.data)
    else:
        bundle = COMMANDS[args.command](cfg, out)
    bundle.write(out)
    return bundle


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        bundle = run(args)
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except LinearityGuardError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (IntegrationError, SingularityError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DomainError, ValueError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    if bundle.status in ("non-converged", "non-identifiable", "unreliable"):
        log.error("%s: %s", args.command, bundle.status)
        return EXIT_FIT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
