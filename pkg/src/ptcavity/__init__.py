"""Photothermal effects in an optical cavity: forward models, time-domain
simulation and parameter estimation from transfer-function phase data."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    IntegrationError,
    LinearityGuardError,
    PtCavityError,
    SingularityError,
)
from .model import (
    CavityConfig,
    ComplexSpring,
    CrystalConfig,
    FrequencyResponse,
    MechanicalConfig,
    OperatingPoint,
    PhotothermalRates,
    cavity_optical_response,
    effective_susceptibility,
    intracavity_power,
    modified_optical_spring,
    optical_spring_constant,
    optomechanical_response,
    photothermal_rates,
    physical_relaxation_rate,
)
from .solver import SolverSettings
from .dynamics import (
    DriveProfile,
    TimeSeries,
    integrate_detuning_ode,
    probe_small_signal,
    probe_sweep,
    simulate_scan,
    simulate_selflock,
)
from .fitting import FitResult, ResponseDataset, nls_fit
from .estimation import (
    ComparisonRegime,
    DetuningSweep,
    fit_cavity_response,
    fit_detuning_curve,
    fit_linear_zero_intercept,
    fit_optomechanical_response,
    method_comparison,
    synthesize,
    weighted_average,
)
