"""Parameter recovery from transfer-function phase data.

Pipeline A ("fixed mirror") fits the cavity optical response for the
photothermal rates.  Pipeline B ("suspended mirror") fits the optomechanical
response chi_eff * H_th for the optical spring constant and absorption rate
with the relaxation rate held fixed.  Rates are in rad/s throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model
from .errors import DataError
from .fitting import FitResult, ResponseDataset, linear_weighted_fit, nls_fit, unwrap_phase, wrap_deg
from .model import MechanicalConfig, PhotothermalRates

DEFAULT_F_MIN_HZ = 15.0

_PEAK_PROFILE = float(model.detuning_profile(model.PEAK_DETUNING))


# --- phase models --------------------------------------------------------------

class CavityResponseModel:
    """H_th(Omega) with parameters (omega_th, gamma_th), or omega_th alone
    when ``gamma_th`` is fixed."""

    def __init__(self, gamma_th=None):
        self.gamma_th = gamma_th
        self.names = ("omega_th",) if gamma_th is not None else ("omega_th", "gamma_th")
        self.units = {"omega_th": "rad/s", "gamma_th": "rad/s"}

    def _rates(self, theta):
        w = theta[0]
        g = self.gamma_th if self.gamma_th is not None else theta[1]
        return w, g

    def evaluate(self, omega, theta):
        w, g = self._rates(theta)
        s = 1j * omega
        return (g + s) / (w + g + s)

    def log_jacobian(self, omega, theta):
        w, g = self._rates(theta)
        s = 1j * omega
        d_w = -1.0 / (w + g + s)
        if self.gamma_th is not None:
            return d_w[:, None]
        d_g = 1.0 / (g + s) + d_w
        return np.column_stack([d_w, d_g])


class OptomechanicalResponseModel:
    """chi_eff(Omega) * H_th(Omega) with parameters (k_opt, omega_th) and
    optionally a free gamma_th as third parameter."""

    def __init__(self, mech: MechanicalConfig, gamma_th=None):
        self.mech = mech
        self.gamma_th = gamma_th
        self.names = ("k_opt", "omega_th") + (() if gamma_th is not None else ("gamma_th",))
        self.units = {"k_opt": "N/m", "omega_th": "rad/s", "gamma_th": "rad/s"}

    def _parts(self, omega, theta):
        k, w = theta[0], theta[1]
        g = self.gamma_th if self.gamma_th is not None else theta[2]
        s = 1j * omega
        h = (g + s) / (w + g + s)
        m = self.mech
        d = -m.effective_mass * omega**2 + m.spring_constant + 1j * m.damping_constant * omega + k * h
        return k, w, g, s, h, d

    def evaluate(self, omega, theta):
        *_, h, d = self._parts(omega, theta)
        return h / d

    def log_jacobian(self, omega, theta):
        k, w, g, s, h, d = self._parts(omega, theta)
        dlogh_w = -1.0 / (w + g + s)
        feedback = 1.0 - k * h / d
        cols = [-h / d, dlogh_w * feedback]
        if self.gamma_th is None:
            cols.append((1.0 / (g + s) + dlogh_w) * feedback)
        return np.column_stack(cols)


# --- pipelines -------------------------------------------------------------------

def _grid_phase_sse(values, data_phase, w):
    r = wrap_deg(np.degrees(np.angle(values)) - data_phase[None, :])
    return np.sum(w[None, :] * r * r, axis=1)


def _weights(data):
    return 1.0 / data.phase_sigma_deg**2 if data.phase_sigma_deg is not None else np.ones(len(data))


def initial_cavity_rates(data: ResponseDataset, gamma_th=None):
    """Coarse log-grid search for (omega_th, gamma_th) over both signs of omega_th."""
    omega = data.omega
    lo = omega[0] / 30.0
    hi = omega[-1] * 3.0
    mags = np.geomspace(lo, hi, 61)
    ws = np.concatenate([-mags[::-1], [0.0], mags])
    gs = np.array([gamma_th]) if gamma_th is not None else mags
    ww, gg = np.meshgrid(ws, gs, indexing="ij")
    ww, gg = ww.ravel(), gg.ravel()
    keep = (ww + gg) != 0
    ww, gg = ww[keep], gg[keep]
    s = 1j * omega[None, :]
    values = (gg[:, None] + s) / (ww[:, None] + gg[:, None] + s)
    sse = _grid_phase_sse(values, data.phase_deg, _weights(data))
    best = int(np.argmin(sse))
    return float(ww[best]), float(gg[best])


def fit_cavity_response(
    data: ResponseDataset,
    init=None,
    f_min=DEFAULT_F_MIN_HZ,
    gamma_th=None,
    fit_magnitude=False,
    **kwargs,
) -> FitResult:
    """Pipeline A: fit the cavity phase response for (omega_th, gamma_th).

    Only points at or above ``f_min`` (Hz) are used; below it the measured
    relaxation is frequency dependent.  With ``gamma_th`` given only omega_th
    is free.  ``init`` defaults to a grid search.
    """
    lo, hi = data.band
    sub = data.in_band((max(lo, f_min or 0.0), hi))
    m = CavityResponseModel(gamma_th)
    if init is None:
        w0, g0 = initial_cavity_rates(sub, gamma_th)
        init = [w0] if gamma_th is not None else [w0, g0]
    init = np.asarray(init, dtype=float)
    floor = gamma_th if gamma_th is not None else max(abs(init[1]), sub.omega[0])
    scale = np.maximum(np.abs(init), floor)
    if fit_magnitude:
        scale = np.append(scale, 1.0)
    return nls_fit(m, sub, init, scale=scale, fit_magnitude=fit_magnitude, **kwargs)


def crossing_frequency(data: ResponseDataset, level_deg=-90.0):
    """First angular frequency where the unwrapped phase falls through ``level_deg``."""
    phase = unwrap_phase(data.phase_deg, 0.0)
    below = np.nonzero(phase <= level_deg)[0]
    if below.size == 0 or below[0] == 0:
        return None
    i = int(below[0])
    f0, f1 = data.omega[i - 1], data.omega[i]
    p0, p1 = phase[i - 1], phase[i]
    return float(f0 + (level_deg - p0) / (p1 - p0) * (f1 - f0))


def initial_spring(data: ResponseDataset, mech: MechanicalConfig, gamma_th, absorption_per_spring=None):
    """Data-driven start (k_opt, omega_th) for pipeline B.

    k_opt comes from the -90 degree crossing, k_opt ~ m (Omega_x^2 - Omega_m^2).
    omega_th uses the configured omega_th/k_opt ratio when one is known, else
    a one-dimensional grid search at that k_opt.
    """
    cross = crossing_frequency(data)
    km = mech.spring_constant
    if cross is None:
        k0 = km
    else:
        k0 = mech.effective_mass * cross**2 - km
        if k0 <= 0:
            k0 = 0.1 * km
    if absorption_per_spring is not None:
        return k0, absorption_per_spring * k0
    mags = np.geomspace(gamma_th * 1e-3, gamma_th * 1e2, 81)
    ws = np.concatenate([-mags[::-1], [0.0], mags])
    ws = ws[ws + gamma_th > 0]
    m = OptomechanicalResponseModel(mech, gamma_th)
    values = np.array([m.evaluate(data.omega, (k0, w)) for w in ws])
    sse = _grid_phase_sse(values, data.phase_deg, _weights(data))
    return k0, float(ws[int(np.argmin(sse))])


def fit_optomechanical_response(
    data: ResponseDataset,
    mech: Optional[MechanicalConfig] = None,
    gamma_th=None,
    init=None,
    absorption_per_spring=None,
    free_gamma=False,
    fit_magnitude=False,
    **kwargs,
) -> FitResult:
    """Pipeline B: fit chi_eff * H_th phase for (k_opt, omega_th).

    ``mech`` and ``gamma_th`` default to the knowns stored on the dataset.
    ``free_gamma`` adds gamma_th as a third free parameter, started at the
    supplied value.
    """
    mech = mech or data.mechanics
    gamma_th = gamma_th if gamma_th is not None else data.gamma_th
    if mech is None or gamma_th is None:
        raise DataError("pipeline B needs the mechanical config and gamma_th")
    sub = data.in_band()
    if init is None:
        init = initial_spring(sub, mech, gamma_th, absorption_per_spring)
    init = list(init)
    if free_gamma and len(init) == 2:
        init.append(gamma_th)
    m = OptomechanicalResponseModel(mech, None if free_gamma else gamma_th)
    scale = [max(abs(init[0]), 1e-3 * mech.spring_constant), max(abs(init[1]), gamma_th)]
    if free_gamma:
        scale.append(max(abs(init[2]), gamma_th))
    if fit_magnitude:
        scale.append(1.0)
    return nls_fit(m, sub, init, scale=scale, fit_magnitude=fit_magnitude, **kwargs)


# --- aggregation ---------------------------------------------------------------------

def weighted_average(values: Sequence[tuple]):
    """Inverse-variance weighted mean of (value, sigma) pairs and its standard error."""
    if len(values) == 0:
        raise ValueError("weighted average of an empty list")
    v = np.array([x for x, _ in values], dtype=float)
    s = np.array([e for _, e in values], dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("all sigmas must be positive")
    w = 1.0 / s**2
    return float(np.sum(w * v) / np.sum(w)), float(1.0 / math.sqrt(np.sum(w)))


@dataclass
class SweepEntry:
    xi0: float
    xi0_sigma: float
    fit: FitResult


@dataclass
class DetuningSweep:
    """Per-detuning fits at one input power.

    Only converged, identifiable fits are admitted; others are kept in
    ``excluded`` for reporting.
    """

    input_power: Optional[float] = None
    entries: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def add(self, xi0, fit: FitResult, xi0_sigma=0.0):
        if any(e.xi0 == xi0 for e in self.entries):
            raise ValueError(f"detuning {xi0!r} already in sweep")
        entry = SweepEntry(float(xi0), float(xi0_sigma), fit)
        if fit.ok and all(v > 0 for v in fit.standard_errors.values()):
            self.entries.append(entry)
            return True
        self.excluded.append(entry)
        return False

    def series(self, which):
        xi = np.array([e.xi0 for e in self.entries])
        val = np.array([e.fit.estimates[which] for e in self.entries])
        err = np.array([e.fit.standard_errors[which] for e in self.entries])
        return xi, val, err


def detuning_curve(xi0, max_value):
    """max_value * profile(xi0) / profile(1/sqrt(3)); peaks at max_value."""
    return max_value * model.detuning_profile(xi0) / _PEAK_PROFILE


def detuning_curve_fit(xi0, values, sigmas) -> FitResult:
    """Weighted fit of values = M * profile(xi0)/profile_peak; returns a FitResult
    whose residuals (fitted minus estimate) are in the values' units."""
    xi0 = np.asarray(xi0, dtype=float)
    if xi0.size < 2 or np.all(xi0 == xi0[0]):
        raise ValueError("degenerate design: detunings must not all be equal")
    x = model.detuning_profile(xi0) / _PEAK_PROFILE
    m, s, res = linear_weighted_fit(x, values, sigmas)
    w = 1.0 / np.asarray(sigmas, dtype=float) ** 2
    return FitResult(
        names=("max_value",), estimates={"max_value": m}, standard_errors={"max_value": s},
        covariance=np.array([[s * s]]), residuals=res, weights=w, iterations=1, converged=True,
        identifiable=True, objective=float(np.sum(w * res**2)), gradient_norm=0.0,
        message="closed form",
    )


def fit_detuning_curve(sweep: DetuningSweep, which, min_entries=4):
    """Peak value (and standard error) of ``which`` over a detuning sweep."""
    if len(sweep.entries) < min_entries:
        raise ValueError(f"need at least {min_entries} converged entries, have {len(sweep.entries)}")
    xi, val, err = sweep.series(which)
    fit = detuning_curve_fit(xi, val, err)
    return fit.estimates["max_value"], fit.standard_errors["max_value"]


def fit_linear_zero_intercept(points: Sequence[tuple]):
    """Slope (and standard error) of value = slope * P0 from (P0, value, sigma)."""
    p = np.array([q[0] for q in points], dtype=float)
    if np.all(p == 0):
        raise ValueError("all powers are zero")
    if len(set(p.tolist())) < 2:
        raise ValueError("need at least two distinct powers")
    v = np.array([q[1] for q in points], dtype=float)
    s = np.array([q[2] for q in points], dtype=float)
    slope, sigma, _ = linear_weighted_fit(p, v, s)
    return slope, sigma


def normalized_rmse(fit: FitResult, reference_max):
    if not reference_max > 0:
        raise ValueError("reference maximum must be positive")
    return fit.rmse / reference_max


# --- synthetic data ---------------------------------------------------------------------

def synthesize(response_model, theta, freq_hz, phase_sigma_deg=0.0, rng=None, band=None, **known):
    """Phase (and magnitude) of ``response_model`` at ``theta`` plus Gaussian phase noise.

    ``rng`` is a numpy Generator; with sigma 0 the data equal the model.
    """
    freq_hz = np.asarray(freq_hz, dtype=float)
    value = response_model.evaluate(2.0 * np.pi * freq_hz, np.asarray(theta, dtype=float))
    phase = np.degrees(np.unwrap(np.angle(value)))
    if phase_sigma_deg > 0:
        if rng is None:
            raise ValueError("noisy synthesis needs an explicit rng")
        phase = phase + rng.normal(0.0, phase_sigma_deg, size=phase.shape)
    sigma = np.full(freq_hz.shape, phase_sigma_deg) if phase_sigma_deg > 0 else None
    return ResponseDataset(
        freq_hz, phase, np.abs(value), sigma, band or (0.0, math.inf),
        metadata={"truth": dict(zip(response_model.names, map(float, theta)))}, **known,
    )


def log_grid(f_min, f_max, points):
    return np.geomspace(f_min, f_max, int(points))


# --- method comparison ---------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRegime:
    """Synthetic setting for comparing the fixed- and suspended-mirror methods.

    ``omega_th_slope`` and ``k_opt_slope`` give the peak (over detuning)
    omega_th (rad/s per W) and k_opt (N/m per W); both scale linearly with
    input power.  Phase noise levels are per point, in degrees.
    """

    mechanics: MechanicalConfig
    gamma_th: float
    omega_th_slope: float
    k_opt_slope: float
    powers: tuple = (0.6, 0.3, 0.15)
    detunings: tuple = (0.3, 0.45, 0.6, 0.8, 1.0, 1.2, 1.5, 1.9, 2.4, 3.0)
    fixed_band_hz: tuple = (15.0, 1000.0)
    suspended_band_hz: tuple = (5.0, 500.0)
    points: int = 60
    fixed_sigma_deg: float = 1.0
    suspended_sigma_deg: float = 1.0


def _single_power_trial(regime: ComparisonRegime, power, rng):
    omega_max = regime.omega_th_slope * power
    k_max = regime.k_opt_slope * power
    fa = log_grid(*regime.fixed_band_hz, regime.points)
    fb = log_grid(*regime.suspended_band_hz, regime.points)
    cav_model = CavityResponseModel(regime.gamma_th)
    om_model = OptomechanicalResponseModel(regime.mechanics, regime.gamma_th)
    fixed = DetuningSweep(power)
    suspended = DetuningSweep(power)
    for xi0 in regime.detunings:
        w_true = float(detuning_curve(xi0, omega_max))
        k_true = float(detuning_curve(xi0, k_max))
        da = synthesize(cav_model, [w_true], fa, regime.fixed_sigma_deg, rng)
        db = synthesize(om_model, [k_true, w_true], fb, regime.suspended_sigma_deg, rng)
        fixed.add(xi0, fit_cavity_response(da, gamma_th=regime.gamma_th, f_min=regime.fixed_band_hz[0]))
        suspended.add(xi0, fit_optomechanical_response(db, regime.mechanics, regime.gamma_th))
    out = {}
    for label, sweep in (("fixed", fixed), ("suspended", suspended)):
        n_fail = len(sweep.excluded)
        try:
            xi, val, err = sweep.series("omega_th")
            curve = detuning_curve_fit(xi, val, err)
            rmse = normalized_rmse(curve, curve.estimates["max_value"])
        except ValueError:
            rmse = math.nan
        out[label] = (rmse, n_fail)
    return out


def _comparison_seed(args):
    regime, seed = args
    rng = np.random.default_rng(seed)
    return [_single_power_trial(regime, p, rng) for p in regime.powers]


@dataclass
class ComparisonReport:
    powers: tuple
    seeds: list
    fixed_rmse: np.ndarray  # (n_seeds, n_powers)
    suspended_rmse: np.ndarray
    failure_rate: float
    reliable: bool

    @property
    def fraction_fixed_worse(self):
        """Per power, share of seeds where the fixed-mirror RMSE is larger."""
        return np.mean(self.fixed_rmse > self.suspended_rmse, axis=0)

    @property
    def median_fixed(self):
        return np.nanmedian(self.fixed_rmse, axis=0)

    @property
    def median_suspended(self):
        return np.nanmedian(self.suspended_rmse, axis=0)

    @property
    def ordering_holds(self):
        return bool(np.all(np.nanmedian(self.fixed_rmse, axis=0) > np.nanmedian(self.suspended_rmse, axis=0)))

    def to_dict(self):
        return {
            "powers_w": list(self.powers),
            "seeds": list(self.seeds),
            "median_normalized_rmse_fixed": self.median_fixed.tolist(),
            "median_normalized_rmse_suspended": self.median_suspended.tolist(),
            "fraction_fixed_worse": self.fraction_fixed_worse.tolist(),
            "failure_rate": self.failure_rate,
            "reliable": self.reliable,
            "ordering_holds": self.ordering_holds,
        }


def method_comparison(regime: ComparisonRegime, seeds, base_seed=0, workers=None) -> ComparisonReport:
    """Monte-Carlo normalized RMSE of both methods' omega_th detuning-curve fits.

    ``seeds`` is a count (seeds base_seed .. base_seed+seeds-1) or an explicit
    list.  Results are ordered by seed regardless of ``workers``.  The
    report is flagged unreliable when more than 20% of per-detuning fits
    fail to converge or are non-identifiable.
    """
    seed_list = list(range(base_seed, base_seed + seeds)) if isinstance(seeds, int) else list(seeds)
    jobs = [(regime, s) for s in seed_list]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_comparison_seed, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_comparison_seed(j) for j in jobs]
    fixed = np.array([[r["fixed"][0] for r in per_seed] for per_seed in results])
    susp = np.array([[r["suspended"][0] for r in per_seed] for per_seed in results])
    failures = sum(r[k][1] for per_seed in results for r in per_seed for k in ("fixed", "suspended"))
    total = 2 * len(seed_list) * len(regime.powers) * len(regime.detunings)
    rate = failures / total if total else 0.0
    return ComparisonReport(tuple(regime.powers), seed_list, fixed, susp, rate, rate <= 0.2)


def rates_from(omega_th, gamma_th) -> PhotothermalRates:
    return PhotothermalRates(float(omega_th), float(gamma_th))
