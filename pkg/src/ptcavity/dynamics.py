"""Time-domain integration of the nonlinear detuning equation.

Internally the actuator position is carried as a normalized detuning
``u = kappa * x_act`` (kappa = 2 F omega0 / (pi c)), so the equation reads

    dxi/dt = -g xi + A / (1 + xi^2) + g u + du/dt + H w_ext(t)

with g the relaxation rate, A the thermal drive and H the heater coupling.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .errors import DomainError, LinearityGuardError
from .model import CavityConfig, CrystalConfig, OperatingPoint
from .solver import SolverSettings, dopri5

DRIVE_KINDS = ("constant_velocity", "sinusoid", "heater_step", "custom_samples")
NORMALIZATIONS = ("none", "figure1b")


@dataclass(frozen=True)
class DriveProfile:
    """Actuator motion x_act(t) (m) and optional external heat (W).

    Build instances with the classmethods rather than the raw constructor.
    """

    kind: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DRIVE_KINDS:
            raise ValueError(f"unknown drive kind {self.kind!r}")
        for key, value in self.parameters.items():
            if key in ("times", "positions"):
                continue
            if not math.isfinite(value):
                raise ValueError(f"drive parameter {key} must be finite")
        if self.kind == "heater_step":
            p = self.parameters
            if not (0 <= p["t_on"] < p["t_off"]):
                raise ValueError("heater times must satisfy 0 <= t_on < t_off")
        if self.kind == "custom_samples":
            times = np.asarray(self.parameters["times"], dtype=float)
            if times.size < 2 or times[0] < 0 or np.any(np.diff(times) <= 0):
                raise ValueError("custom sample times must be non-negative and increasing")

    @classmethod
    def constant_velocity(cls, velocity, start=0.0):
        return cls("constant_velocity", {"velocity": float(velocity), "start": float(start)})

    @classmethod
    def sinusoid(cls, amplitude, angular_frequency, bias=0.0):
        return cls(
            "sinusoid",
            {"amplitude": float(amplitude), "angular_frequency": float(angular_frequency), "bias": float(bias)},
        )

    @classmethod
    def heater_step(cls, power, t_on, t_off, bias=0.0):
        return cls("heater_step", {"power": float(power), "t_on": float(t_on), "t_off": float(t_off),
                                   "bias": float(bias)})

    @classmethod
    def custom_samples(cls, times, positions):
        times = tuple(float(t) for t in times)
        positions = tuple(float(x) for x in positions)
        if len(times) != len(positions):
            raise ValueError("times and positions differ in length")
        return cls("custom_samples", {"times": times, "positions": positions})

    def position(self, t):
        """x_act at time(s) t."""
        p = self.parameters
        t = np.asarray(t, dtype=float)
        if self.kind == "constant_velocity":
            return p["start"] + p["velocity"] * t
        if self.kind == "sinusoid":
            return p["bias"] + p["amplitude"] * np.sin(p["angular_frequency"] * t)
        if self.kind == "heater_step":
            return np.full_like(t, p["bias"])
        return np.interp(t, p["times"], p["positions"])

    def heat(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind != "heater_step":
            return np.zeros_like(t)
        p = self.parameters
        return np.where((t >= p["t_on"]) & (t < p["t_off"]), p["power"], 0.0)

    def breakpoints(self):
        """Times where the right-hand side is discontinuous."""
        if self.kind == "heater_step":
            return (self.parameters["t_on"], self.parameters["t_off"])
        if self.kind == "custom_samples":
            return self.parameters["times"]
        return ()

    def rate_scale(self, kappa):
        """Characteristic rate (1/s) the drive imposes on the detuning."""
        if self.kind == "sinusoid":
            return abs(self.parameters["angular_frequency"])
        if self.kind == "constant_velocity":
            return kappa * abs(self.parameters["velocity"])
        return 0.0


@dataclass(frozen=True)
class SimState:
    time: float
    xi: float
    x_act: float
    x_th: float
    transmitted_power_normalized: float


@dataclass
class TimeSeries:
    """Columnar trajectory; index it to get :class:`SimState` samples."""

    time: np.ndarray
    xi: np.ndarray
    x_act: np.ndarray
    x_th: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.time) <= 0):
            raise ValueError("time samples must be strictly increasing")

    @property
    def transmitted_power(self):
        return 1.0 / (1.0 + self.xi**2)

    def __len__(self):
        return len(self.time)

    def __getitem__(self, i):
        return SimState(
            float(self.time[i]), float(self.xi[i]), float(self.x_act[i]), float(self.x_th[i]),
            float(1.0 / (1.0 + self.xi[i] ** 2)),
        )

    def states(self):
        return [self[i] for i in range(len(self))]

    def columns(self):
        """Arrays in the CSV column order."""
        return {
            "time_s": self.time,
            "xi": self.xi,
            "x_act_m": self.x_act,
            "x_th_m": self.x_th,
            "p_trans_norm": self.transmitted_power,
        }


def _equilibria(gamma, drive, u):
    """Real roots of -g xi + A/(1+xi^2) + g u = 0, ascending."""
    if drive == 0:
        return np.array([u])
    roots = np.roots([gamma, -gamma * u, gamma, -gamma * u - drive])
    real = roots[np.abs(roots.imag) <= 1e-9 * (1 + np.abs(roots.real))].real
    # polish: np.roots is only accurate to ~1e-12 relative
    out = []
    for r in real:
        for _ in range(3):
            f = -gamma * r + drive / (1 + r * r) + gamma * u
            df = -gamma - 2 * drive * r / (1 + r * r) ** 2
            if df == 0:
                break
            r -= f / df
        out.append(r)
    return np.unique(np.round(np.sort(out), 13))


def _rhs(gamma, drive_coeff, kappa, heater_gain, drive: DriveProfile, window=None):
    """Right-hand side closure; ``window`` pins piecewise drives to one segment."""
    p = drive.parameters
    g, a = gamma, drive_coeff
    if drive.kind == "constant_velocity":
        u0, du = kappa * p["start"], kappa * p["velocity"]

        def f(t, xi):
            return -g * xi + a / (1.0 + xi * xi) + g * (u0 + du * t) + du

    elif drive.kind == "sinusoid":
        ub, ua, w = kappa * p["bias"], kappa * p["amplitude"], p["angular_frequency"]
        sin, cos = math.sin, math.cos

        def f(t, xi):
            return -g * xi + a / (1.0 + xi * xi) + g * (ub + ua * sin(w * t)) + ua * w * cos(w * t)

    elif drive.kind == "heater_step":
        ub, q = kappa * p["bias"], heater_gain * p["power"]
        t_on, t_off = p["t_on"], p["t_off"]
        if window is not None:
            # constant over an integration segment, including its end point
            mid = 0.5 * (window[0] + window[1])
            c = g * ub + (q if t_on <= mid < t_off else 0.0)

            def f(t, xi):
                return -g * xi + a / (1.0 + xi * xi) + c

        else:

            def f(t, xi):
                heat = q if t_on <= t < t_off else 0.0
                return -g * xi + a / (1.0 + xi * xi) + g * ub + heat

    else:
        times = np.asarray(p["times"])
        us = kappa * np.asarray(p["positions"])
        slopes = np.append(np.diff(us) / np.diff(times), 0.0)
        if window is not None:
            mid = 0.5 * (window[0] + window[1])
            if mid < times[0]:
                u0, du, t_ref = us[0], 0.0, 0.0
            else:
                j = int(np.searchsorted(times, mid, side="right")) - 1
                u0, du, t_ref = us[j], slopes[j], times[j]

            def f(t, xi):
                return -g * xi + a / (1.0 + xi * xi) + g * (u0 + du * (t - t_ref)) + du

            return f

        def f(t, xi):
            if t <= times[0]:
                u, du = us[0], 0.0
            elif t >= times[-1]:
                u, du = us[-1], 0.0
            else:
                j = int(np.searchsorted(times, t, side="right")) - 1
                u, du = us[j] + slopes[j] * (t - times[j]), slopes[j]
            return -g * xi + a / (1.0 + xi * xi) + g * u + du

    return f


def default_max_step(gamma, drive_coeff, drive: DriveProfile, kappa):
    """0.01 over the fastest rate in the problem."""
    peak_absorption = 2.0 * abs(drive_coeff) * float(model.detuning_profile(model.PEAK_DETUNING))
    return 0.01 / max(gamma, peak_absorption, drive.rate_scale(kappa))


def integrate_detuning_ode(
    cav: CavityConfig,
    cry: CrystalConfig,
    op: OperatingPoint,
    drive: DriveProfile,
    t_span,
    solver: SolverSettings = SolverSettings(),
    xi_init: Optional[float] = None,
    sample_times=None,
) -> TimeSeries:
    """Integrate the detuning equation over ``t_span`` and sample it.

    Only ``op.input_power`` is used; the stationary detuning is an outcome
    of the drive here, not an input.  The initial detuning defaults to the
    actuator position with a cold crystal (x_th = 0).  Samples are taken
    every ``solver.sample_interval`` seconds (default: span / 2000) unless
    explicit ``sample_times`` are given.
    """
    t0, t1 = (float(t) for t in t_span)
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    kappa = cav.detuning_per_meter
    gamma = cry.relaxation_rate
    a = model.thermal_drive(cav, cry, op.input_power)
    hgain = model.heater_coupling(cav, cry)
    f = _rhs(gamma, a, kappa, hgain, drive)

    if sample_times is None:
        dt = solver.sample_interval or (t1 - t0) / 2000.0
        n = int(math.floor((t1 - t0) / dt + 1e-9))
        sample_times = t0 + dt * np.arange(n + 1)
    sample_times = np.asarray(sample_times, dtype=float)
    max_step = solver.max_step or default_max_step(gamma, a, drive, kappa)
    if xi_init is None:
        xi_init = kappa * float(drive.position(t0))

    # integrate segment by segment so heater/custom discontinuities are steps
    edges = [t0] + [b for b in drive.breakpoints() if t0 < b < t1] + [t1]
    xi = np.empty_like(sample_times)
    y, h = float(xi_init), None
    for lo, hi in zip(edges[:-1], edges[1:]):
        last = hi == t1
        mask = (sample_times >= lo) & ((sample_times <= hi) if last else (sample_times < hi))
        if drive.breakpoints():
            f = _rhs(gamma, a, kappa, hgain, drive, window=(lo, hi))
        seg, y, h = dopri5(f, lo, y, hi, sample_times[mask], solver.rtol, solver.atol, max_step,
                           first_step=h or None, max_steps=solver.max_steps)
        xi[mask] = seg

    x_act = np.asarray(drive.position(sample_times), dtype=float)
    x_th = xi / kappa - x_act
    meta = {
        "cavity": cav, "crystal": cry, "operating_point": op, "drive": drive,
        "solver": solver, "max_step": max_step, "thermal_drive": a, "normalization": "none",
    }
    return TimeSeries(sample_times, xi, x_act, x_th, meta)


# --- scans -----------------------------------------------------------------

@dataclass(frozen=True)
class ScanFeatures:
    peak_power: float
    peak_time: float
    half_max_width: float  # total time with P >= 1/2
    time_to_resonance: float  # from first rising half-max crossing to the peak


def scan_features(series: TimeSeries) -> ScanFeatures:
    t = series.time
    p = series.transmitted_power
    i_peak = int(np.argmax(p))
    above = p >= 0.5
    if not np.any(above):
        return ScanFeatures(float(p[i_peak]), float(t[i_peak]), 0.0, math.nan)
    # width from linear interpolation of every half-max crossing
    width = 0.0
    dt = np.diff(t)
    crossings = []
    for i in range(len(t) - 1):
        if above[i] and above[i + 1]:
            width += dt[i]
        elif above[i] != above[i + 1]:
            tc = t[i] + (0.5 - p[i]) / (p[i + 1] - p[i]) * dt[i]
            crossings.append(tc)
            width += (t[i + 1] - tc) if above[i + 1] else (tc - t[i])
    rising = [c for c in crossings if c <= t[i_peak]]
    start = rising[0] if rising else t[0]
    return ScanFeatures(float(p[i_peak]), float(t[i_peak]), float(width), float(t[i_peak] - start))


def simulate_scan(
    cav: CavityConfig,
    cry: CrystalConfig,
    op_power,
    velocity,
    normalization="none",
    scan_range=None,
    solver: SolverSettings = SolverSettings(),
    samples=20001,
) -> TimeSeries:
    """Sweep the actuator at constant ``velocity`` (m/s) through resonance.

    The actuator travels from ``-sign(v) * R`` to ``+sign(v) * R`` in
    normalized detuning, starting at thermal equilibrium.  ``R`` defaults to
    ``10 + 2 A / g`` so that a thermally dragged resonance is still crossed.
    The photothermal-free resonance (u = 0) falls at the scan midpoint.

    With ``normalization="figure1b"`` the time axis is re-expressed in units
    of the photothermal-free half-width, centred on that midpoint.
    """
    if velocity == 0 or not math.isfinite(velocity):
        raise ValueError("scan velocity must be finite and non-zero")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    op = OperatingPoint(op_power, 0.0)
    kappa = cav.detuning_per_meter
    gamma = cry.relaxation_rate
    a = model.thermal_drive(cav, cry, op_power)
    if scan_range is None:
        scan_range = 10.0 + 2.0 * abs(a) / gamma
    sign = math.copysign(1.0, velocity)
    u_start = -sign * scan_range
    rate = kappa * abs(velocity)
    duration = 2.0 * scan_range / rate
    roots = _equilibria(gamma, a, u_start)
    xi_init = float(roots[np.argmin(np.abs(roots - u_start))])
    drive = DriveProfile.constant_velocity(velocity, start=u_start / kappa)
    times = np.linspace(0.0, duration, samples)
    series = integrate_detuning_ode(cav, cry, op, drive, (0.0, duration), solver, xi_init, times)
    series.metadata.update(velocity=velocity, scan_range=scan_range, resonance_time=duration / 2)
    if normalization == "figure1b":
        series.time = (series.time - duration / 2) * rate
        series.metadata["normalization"] = "figure1b"
        series.metadata["time_unit"] = "photothermal-free half-widths"
    return series


# --- self-locking ------------------------------------------------------------

@dataclass
class SelfLockResult:
    series: TimeSeries
    pre_heating_xi: float
    final_xi: float
    equilibria: np.ndarray  # all equilibria for the post-heater actuator bias
    equilibrium_xi: Optional[float]  # equilibrium the trajectory settled on
    stability_slope: Optional[float]  # d(dxi/dt)/dxi at equilibrium_xi
    locked: bool
    lock_time: Optional[float]  # first time after which xi stays near equilibrium_xi

    @property
    def stable(self):
        return self.stability_slope is not None and self.stability_slope < 0


def selflock_equilibria(cav, cry, op_power, bias=0.0):
    """Equilibria xi* of the detuning equation with the heater off.

    These solve g (xi - u) = A / (1 + xi^2), u = kappa * bias.
    """
    gamma = cry.relaxation_rate
    a = model.thermal_drive(cav, cry, op_power)
    return _equilibria(gamma, a, cav.detuning_per_meter * bias)


def simulate_selflock(
    cav: CavityConfig,
    cry: CrystalConfig,
    op_power,
    heater: DriveProfile,
    t_span,
    solver: SolverSettings = SolverSettings(),
    settle_tolerance=1e-3,
) -> SelfLockResult:
    """Heat the crystal for a window and watch whether the cavity self-locks.

    The run starts on the cold (off-resonance) equilibrium nearest the
    actuator bias.  A run is *locked* when it ends settled on a stable
    equilibrium other than that starting one.
    """
    if heater.kind != "heater_step":
        raise ValueError("self-locking needs a heater_step drive")
    t0, t1 = t_span
    if not (t0 <= heater.parameters["t_on"] and heater.parameters["t_off"] <= t1):
        raise ValueError("heater window must lie inside t_span")
    gamma = cry.relaxation_rate
    a = model.thermal_drive(cav, cry, op_power)
    u = cav.detuning_per_meter * heater.parameters["bias"]
    roots = _equilibria(gamma, a, u)
    pre = float(roots[np.argmin(np.abs(roots - u))])
    series = integrate_detuning_ode(cav, cry, OperatingPoint(op_power, 0.0), heater, t_span, solver, pre)

    final = float(series.xi[-1])
    nearest = float(roots[np.argmin(np.abs(roots - final))])
    tol = settle_tolerance * (1.0 + abs(nearest))
    settled = abs(final - nearest) < tol
    eq = nearest if settled else None
    slope = -gamma - 2.0 * a * nearest / (1.0 + nearest**2) ** 2 if settled else None
    locked = bool(settled and slope < 0 and abs(nearest - pre) > tol)
    lock_time = None
    if settled:
        off = np.abs(series.xi - nearest) >= tol
        after = series.time >= heater.parameters["t_off"]
        idx = np.nonzero(off & after)[0]
        if idx.size == 0:
            lock_time = float(heater.parameters["t_off"])
        elif idx[-1] + 1 < len(series):
            lock_time = float(series.time[idx[-1] + 1])
    series.metadata.update(pre_heating_xi=pre, equilibria=roots)
    return SelfLockResult(series, pre, final, roots, eq, slope, locked, lock_time)


# --- small-signal probe --------------------------------------------------------

def actuator_bias(cav, cry, op):
    """Actuator position (m) that makes op.stationary_detuning an equilibrium."""
    gamma = cry.relaxation_rate
    a = model.thermal_drive(cav, cry, op.input_power)
    xi0 = op.stationary_detuning
    return (xi0 - a / (gamma * (1.0 + xi0 * xi0))) / cav.detuning_per_meter


def linearity_limit(xi0):
    """Largest admissible |delta xi| around xi0."""
    if xi0 == 0:
        return math.inf
    return 0.05 * (1.0 + xi0 * xi0) / (2.0 * abs(xi0))


def probe_small_signal(
    cav: CavityConfig,
    cry: CrystalConfig,
    op: OperatingPoint,
    omega,
    amplitude,
    solver: SolverSettings = SolverSettings(),
    periods=4,
    samples_per_period=64,
):
    """Measure dx/dx_act at ``omega`` by simulating a sinusoidal actuator drive.

    The actuator is biased so that ``op.stationary_detuning`` is an
    equilibrium, driven with ``amplitude`` (m), and the detuning is
    demodulated over ``periods`` whole drive periods after discarding
    10 relaxation times plus 5 drive periods.
    """
    if not (omega > 0 and math.isfinite(omega)):
        raise ValueError("probe frequency must be positive")
    rates = model.photothermal_rates(cav, cry, op)
    if rates.pole <= 0:
        raise DomainError(
            "operating point is unstable (omega_th + gamma_th <= 0); it cannot be probed open-loop"
        )
    kappa = cav.detuning_per_meter
    xi0 = op.stationary_detuning
    expected = kappa * abs(amplitude) * max(1.0, rates.relaxation_rate / rates.pole)
    if expected >= linearity_limit(xi0):
        raise LinearityGuardError(
            f"probe amplitude {amplitude!r} m gives |delta xi| ~ {expected:.3g} >= "
            f"{linearity_limit(xi0):.3g}; use a smaller amplitude"
        )
    period = 2.0 * math.pi / omega
    settle = 10.0 / min(rates.relaxation_rate, rates.pole) + 5.0 * period
    n = periods * samples_per_period
    times = settle + period * np.arange(n) / samples_per_period
    t_end = settle + periods * period
    drive = DriveProfile.sinusoid(amplitude, omega, bias=actuator_bias(cav, cry, op))
    series = integrate_detuning_ode(cav, cry, op, drive, (0.0, t_end), solver, xi0, times)
    dx = (series.xi - xi0) / kappa
    phase = omega * times
    in_phase = 2.0 / n * np.sum(dx * np.sin(phase))
    quadrature = 2.0 / n * np.sum(dx * np.cos(phase))
    return complex(in_phase, quadrature) / amplitude


def _probe_one(args):
    return probe_small_signal(*args)


def probe_sweep(cav, cry, op, omegas, amplitude, solver=SolverSettings(), workers=None):
    """:func:`probe_small_signal` over a frequency grid.

    Returns a FrequencyResponse.  ``workers`` > 1 fans the frequencies out
    to processes; results keep input order.
    """
    jobs = [(cav, cry, op, float(w), amplitude, solver) for w in omegas]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            values = list(pool.map(_probe_one, jobs))
    else:
        values = [_probe_one(j) for j in jobs]
    return model.tabulate("cavity_optical_response", omegas, values)
