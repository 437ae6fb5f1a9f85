"""Closed-form frequency-domain model of a cavity with a photothermal crystal.

All angular quantities are in rad/s.  Functions taking ``omega`` accept a
scalar or a numpy array and return the same shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError, SingularityError

SPEED_OF_LIGHT = 299792458.0  # m/s

#: Detuning at which xi/(1+xi^2)^2 peaks.
PEAK_DETUNING = 1.0 / math.sqrt(3.0)

QUANTITIES = ("cavity_optical_response", "optomechanical_response", "susceptibility")


def hz_to_rad(f):
    return 2.0 * np.pi * f


def rad_to_hz(w):
    return w / (2.0 * np.pi)


def _positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise ConfigurationError(f"must be finite and > 0, got {value!r}", name)


def _finite(name, value):
    if not math.isfinite(value):
        raise ConfigurationError(f"must be finite, got {value!r}", name)


@dataclass(frozen=True)
class CavityConfig:
    finesse: float
    one_way_length: float  # m
    carrier_angular_frequency: float  # rad/s

    def __post_init__(self):
        _positive("finesse", self.finesse)
        _positive("one_way_length", self.one_way_length)
        _positive("carrier_angular_frequency", self.carrier_angular_frequency)

    @classmethod
    def from_wavelength(cls, finesse, one_way_length, wavelength):
        _positive("wavelength", wavelength)
        return cls(finesse, one_way_length, 2.0 * math.pi * SPEED_OF_LIGHT / wavelength)

    @property
    def decay_rate(self):
        """Cavity amplitude decay rate pi*c/(2*F*L) in rad/s."""
        return math.pi * SPEED_OF_LIGHT / (2.0 * self.finesse * self.one_way_length)

    @property
    def detuning_per_meter(self):
        """Factor converting a length change (m) to normalized detuning."""
        return 2.0 * self.finesse * self.carrier_angular_frequency / (math.pi * SPEED_OF_LIGHT)


@dataclass(frozen=True)
class CrystalConfig:
    """Photothermal crystal constants.

    The bulk properties (conductivity, density, specific heat, beam radius)
    are only needed by :func:`physical_relaxation_rate` and may be omitted.
    """

    thermal_expansion: float  # 1/K, thermo-optic part included; any sign
    absorption_coefficient: float  # 1/m; zero disables absorption
    crystal_length: float  # m
    heat_capacity: float  # J/K
    thermal_resistance: float  # K/W
    thermal_conductivity: Optional[float] = None  # W/(m K)
    density: Optional[float] = None  # kg/m^3
    specific_heat_capacity: Optional[float] = None  # J/(kg K)
    beam_radius: Optional[float] = None  # m

    def __post_init__(self):
        _finite("thermal_expansion", self.thermal_expansion)
        if not (math.isfinite(self.absorption_coefficient) and self.absorption_coefficient >= 0):
            raise ConfigurationError(
                f"must be finite and >= 0, got {self.absorption_coefficient!r}", "absorption_coefficient"
            )
        _positive("crystal_length", self.crystal_length)
        _positive("heat_capacity", self.heat_capacity)
        _positive("thermal_resistance", self.thermal_resistance)
        for name in ("thermal_conductivity", "density", "specific_heat_capacity", "beam_radius"):
            value = getattr(self, name)
            if value is not None:
                _positive(name, value)

    @property
    def relaxation_rate(self):
        """gamma_th = 1/(k C) in rad/s."""
        return 1.0 / (self.thermal_resistance * self.heat_capacity)


@dataclass(frozen=True)
class MechanicalConfig:
    effective_mass: float  # kg
    resonance_angular_frequency: float  # rad/s
    quality_factor: float

    def __post_init__(self):
        _positive("effective_mass", self.effective_mass)
        _positive("resonance_angular_frequency", self.resonance_angular_frequency)
        _positive("quality_factor", self.quality_factor)

    @property
    def spring_constant(self):
        return self.effective_mass * self.resonance_angular_frequency**2

    @property
    def damping_constant(self):
        return self.effective_mass * self.resonance_angular_frequency / self.quality_factor

    def spring(self):
        """Complex mechanical spring K_m = k_m + i Gamma_m Omega."""
        return ComplexSpring(self.spring_constant, self.damping_constant)


@dataclass(frozen=True)
class OperatingPoint:
    input_power: float  # W
    stationary_detuning: float

    def __post_init__(self):
        if not (math.isfinite(self.input_power) and self.input_power >= 0):
            raise ConfigurationError(f"must be finite and >= 0, got {self.input_power!r}", "input_power")
        _finite("stationary_detuning", self.stationary_detuning)


@dataclass(frozen=True)
class PhotothermalRates:
    absorption_rate: float  # omega_th, rad/s, signed
    relaxation_rate: float  # gamma_th, rad/s

    def __post_init__(self):
        _finite("absorption_rate", self.absorption_rate)
        _positive("relaxation_rate", self.relaxation_rate)

    @property
    def pole(self):
        """omega_th + gamma_th; negative means the stationary point is unstable."""
        return self.absorption_rate + self.relaxation_rate


@dataclass(frozen=True)
class ComplexSpring:
    """K(Omega) = real_part + i * imaginary_coefficient * Omega."""

    real_part: float  # N/m
    imaginary_coefficient: float  # N s/m

    def __post_init__(self):
        _finite("real_part", self.real_part)
        _finite("imaginary_coefficient", self.imaginary_coefficient)

    def __call__(self, omega):
        return self.real_part + 1j * self.imaginary_coefficient * np.asarray(omega, dtype=float)

    def force(self, displacement, omega):
        """Radiation-pressure style restoring force -K(Omega) * dx."""
        return -self(omega) * displacement


@dataclass(frozen=True)
class FrequencyResponse:
    omega: np.ndarray  # rad/s
    values: np.ndarray  # complex
    quantity: str

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        values = np.asarray(self.values, dtype=complex)
        if self.quantity not in QUANTITIES:
            raise ValueError(f"unknown quantity {self.quantity!r}")
        if omega.ndim != 1 or omega.shape != values.shape:
            raise ValueError("omega and values must be 1-D arrays of equal length")
        if np.any(omega <= 0) or np.any(np.diff(omega) <= 0):
            raise ValueError("angular frequencies must be positive and strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("response values must be finite")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "values", values)

    @property
    def frequency_hz(self):
        return rad_to_hz(self.omega)

    @property
    def phase_deg(self):
        return np.degrees(np.unwrap(np.angle(self.values)))


def detuning_profile(xi):
    """xi / (1 + xi^2)^2, the shared detuning dependence of k_opt and omega_th."""
    xi = np.asarray(xi, dtype=float)
    return xi / (1.0 + xi * xi) ** 2


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} must be finite")


def intracavity_power(cav: CavityConfig, op: OperatingPoint, xi):
    """Near-resonance intracavity power (2F/pi) P0 / (1 + xi^2)."""
    _check_finite("xi", xi)
    xi = np.asarray(xi, dtype=float)
    out = 2.0 * cav.finesse / math.pi * op.input_power / (1.0 + xi * xi)
    return out if out.ndim else float(out)


def detuning_from_displacement(cav: CavityConfig, x):
    _check_finite("x", x)
    out = cav.detuning_per_meter * np.asarray(x, dtype=float)
    return out if out.ndim else float(out)


def thermal_drive(cav: CavityConfig, cry: CrystalConfig, input_power):
    """Coefficient A of the 1/(1+xi^2) heating term in the detuning ODE (1/s).

    omega_th = 2 A xi0 / (1 + xi0^2)^2.
    """
    return (
        4.0 * cav.finesse**2 * cav.carrier_angular_frequency
        * cry.thermal_expansion * cry.absorption_coefficient * cry.crystal_length**2
        * input_power
        / (math.pi**2 * SPEED_OF_LIGHT * cry.heat_capacity)
    )


def heater_coupling(cav: CavityConfig, cry: CrystalConfig):
    """d(xi)/dt per watt of external heat delivered to the crystal."""
    return cav.detuning_per_meter * cry.thermal_expansion * cry.crystal_length / cry.heat_capacity


def photothermal_rates(cav: CavityConfig, cry: CrystalConfig, op: OperatingPoint) -> PhotothermalRates:
    if cry.heat_capacity <= 0 or cry.thermal_resistance <= 0:
        raise ConfigurationError("heat capacity and thermal resistance must be positive")
    a = thermal_drive(cav, cry, op.input_power)
    return PhotothermalRates(2.0 * a * float(detuning_profile(op.stationary_detuning)), cry.relaxation_rate)


def cavity_optical_response(rates: PhotothermalRates, omega):
    """H_th = (gamma_th + i Omega) / ((omega_th + gamma_th) + i Omega)."""
    omega = np.asarray(omega, dtype=float)
    pole = rates.pole
    if pole == 0 and np.any(omega == 0):
        raise SingularityError("H_th evaluated at its pole (omega_th + gamma_th = 0, Omega = 0)")
    # 1 - w/(w + g + i Omega): exact unity for w = 0 and no cancellation at high Omega
    out = 1.0 - rates.absorption_rate / (pole + 1j * omega)
    return out if out.ndim else complex(out)


def optical_spring_constant(cav: CavityConfig, op: OperatingPoint):
    """Real optical spring constant k_opt (N/m) valid for Omega << cavity decay rate."""
    return float(
        16.0 * cav.finesse**2 * cav.carrier_angular_frequency * op.input_power
        / (math.pi**2 * SPEED_OF_LIGHT**2)
        * detuning_profile(op.stationary_detuning)
    )


def optical_damping_estimate(cav: CavityConfig, k_opt, mech: MechanicalConfig):
    """Leading-order optical damping constant Gamma_opt = -k_opt / gamma (N s/m).

    Follows from Gamma_opt / (m Omega_opt) = -Omega_opt / gamma with
    Omega_opt = sqrt(k_opt / m); the mass cancels.
    """
    return -k_opt / cav.decay_rate


def loss_angle(cav: CavityConfig, k_opt, mech: MechanicalConfig):
    """Gamma_opt / (m Omega_opt), i.e. -Omega_opt / gamma."""
    omega_opt = math.sqrt(k_opt / mech.effective_mass)
    if omega_opt == 0:
        return 0.0
    return optical_damping_estimate(cav, k_opt, mech) / (mech.effective_mass * omega_opt)


def modified_optical_spring(k_opt, rates: PhotothermalRates, omega, optical_damping=0.0):
    """Photothermally modified optical spring K_opt-th(Omega) in N/m.

    With ``optical_damping`` = 0 (the default) this is
    k_opt [(w+g) g + Omega^2 + i w Omega] / [(w+g)^2 + Omega^2], which is
    exactly ``k_opt * H_th``.  A non-zero Gamma_opt multiplies H_th by the
    full complex spring k_opt + i Gamma_opt Omega instead.
    """
    omega = np.asarray(omega, dtype=float)
    h = cavity_optical_response(rates, omega)
    return (k_opt + 1j * optical_damping * omega) * h


def effective_susceptibility(mech: MechanicalConfig, k_opt, rates: PhotothermalRates, omega,
                             optical_damping=0.0):
    """chi_eff = 1 / (-m Omega^2 + K_m + K_opt-th) in m/N."""
    omega = np.asarray(omega, dtype=float)
    denom = (
        -mech.effective_mass * omega**2
        + mech.spring()(omega)
        + modified_optical_spring(k_opt, rates, omega, optical_damping)
    )
    if np.any(denom == 0):
        raise SingularityError("effective susceptibility evaluated at an exact pole")
    out = 1.0 / denom
    return out if np.ndim(out) else complex(out)


def optomechanical_response(mech: MechanicalConfig, k_opt, rates: PhotothermalRates, omega,
                            optical_damping=0.0):
    """chi_eff * H_th, the response from mirror force to effective length change."""
    out = effective_susceptibility(mech, k_opt, rates, omega, optical_damping) * cavity_optical_response(
        rates, omega
    )
    return out if np.ndim(out) else complex(out)


def physical_relaxation_rate(cry: CrystalConfig):
    """Relaxation rate from bulk properties, kappa / (rho C0 r0^2), in rad/s."""
    missing = [
        name
        for name in ("thermal_conductivity", "density", "specific_heat_capacity", "beam_radius")
        if getattr(cry, name) is None
    ]
    if missing:
        raise ConfigurationError(f"bulk properties required: {', '.join(missing)}")
    if cry.beam_radius == 0:
        raise ZeroDivisionError("beam radius is zero")
    return cry.thermal_conductivity / (cry.density * cry.specific_heat_capacity * cry.beam_radius**2)


def tabulate(quantity, omega, values) -> FrequencyResponse:
    return FrequencyResponse(np.asarray(omega, dtype=float), np.asarray(values, dtype=complex), quantity)
