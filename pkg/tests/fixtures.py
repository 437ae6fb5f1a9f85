"""Shared test configurations."""

import math

from ptcavity.model import SPEED_OF_LIGHT, CavityConfig, CrystalConfig, MechanicalConfig

TWO_PI = 2.0 * math.pi
CAV = CavityConfig.from_wavelength(100.0, 0.215, 1064e-9)
KAPPA = CAV.detuning_per_meter
MECH = MechanicalConfig(2.8e-4, TWO_PI * 14.2, 193.0)

HEAT_CAPACITY = 0.01
EXPANSION = 1e-5
CRYSTAL_LENGTH = 0.01
REFERENCE_POWER = 0.6


def make_crystal(gamma, drive, power=REFERENCE_POWER, cav=CAV, expansion=EXPANSION, **bulk):
    """Crystal whose relaxation rate is ``gamma`` and whose thermal drive A
    equals ``drive`` (both 1/s) at input ``power``."""
    absorption = (
        drive * math.pi**2 * SPEED_OF_LIGHT * HEAT_CAPACITY
        / (4.0 * cav.finesse**2 * cav.carrier_angular_frequency * expansion * CRYSTAL_LENGTH**2 * power)
    )
    return CrystalConfig(
        expansion, abs(absorption), CRYSTAL_LENGTH, HEAT_CAPACITY, 1.0 / (gamma * HEAT_CAPACITY), **bulk
    )
