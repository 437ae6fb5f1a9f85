import math

import numpy as np
import pytest
from scipy.optimize import brentq

from ptcavity import dynamics, model
from ptcavity.dynamics import DriveProfile
from ptcavity.errors import DomainError, IntegrationError, LinearityGuardError
from ptcavity.model import SPEED_OF_LIGHT, CrystalConfig, OperatingPoint, PhotothermalRates
from ptcavity.solver import SolverSettings, dopri5

from fixtures import CAV, KAPPA, TWO_PI, make_crystal

GAMMA = TWO_PI * 12.0
SOLVER = SolverSettings()


def no_absorption(gamma=GAMMA, expansion=1e-5):
    return CrystalConfig(expansion, 0.0, 0.01, 0.01, 1.0 / (gamma * 0.01))


def no_expansion(gamma=GAMMA):
    return CrystalConfig(0.0, 0.3, 0.01, 0.01, 1.0 / (gamma * 0.01))


# --- integrator ------------------------------------------------------------------

def test_dopri5_matches_closed_form():
    ts = np.linspace(0.0, 3.0, 31)
    ys, y_end, _ = dopri5(lambda t, y: -2.0 * y + math.sin(t), 0.0, 1.0, 3.0, ts, 1e-10, 1e-12)
    exact = (6 * np.exp(-2 * ts) + 2 * np.sin(ts) - np.cos(ts)) / 5
    np.testing.assert_allclose(ys, exact, atol=1e-9)
    assert y_end == ys[-1]


def test_dopri5_blow_up_raises_with_time():
    with pytest.raises(IntegrationError) as err:
        dopri5(lambda t, y: y * y, 0.0, 1.0, 2.0, [2.0])
    assert 0.9 < err.value.time <= 1.0 + 1e-6


def test_max_steps_enforced():
    cry = make_crystal(GAMMA, 5 * GAMMA)
    with pytest.raises(IntegrationError):
        dynamics.integrate_detuning_ode(CAV, cry, OperatingPoint(0.6, 0), DriveProfile.constant_velocity(0.0),
                                        (0.0, 1.0), SolverSettings(max_steps=5), xi_init=3.0)


# --- detuning equation ----------------------------------------------------------------

def test_exponential_decay_without_absorption():
    series = dynamics.integrate_detuning_ode(
        CAV, no_absorption(), OperatingPoint(0.6, 0.0), DriveProfile.constant_velocity(0.0),
        (0.0, 10 / GAMMA), SOLVER, xi_init=2.5,
    )
    np.testing.assert_allclose(series.xi, 2.5 * np.exp(-GAMMA * series.time), rtol=1e-7, atol=1e-9)
    # |xi| is non-increasing
    assert np.all(np.diff(np.abs(series.xi)) <= 0)


@pytest.mark.parametrize("xi_init", [-4.0, -0.3, 0.7, 12.0])
def test_abs_detuning_non_increasing_without_absorption(xi_init):
    series = dynamics.integrate_detuning_ode(
        CAV, no_absorption(), OperatingPoint(2.0, 0.0), DriveProfile.constant_velocity(0.0),
        (0.0, 20 / GAMMA), SOLVER, xi_init=xi_init,
    )
    assert np.all(np.diff(np.abs(series.xi)) <= 0)


def test_heater_response_closed_form():
    cry = no_absorption()
    w = 2e-3
    drive = DriveProfile.heater_step(w, 0.1, 0.4)
    series = dynamics.integrate_detuning_ode(CAV, cry, OperatingPoint(0.6, 0), drive, (0.0, 0.8), SOLVER,
                                             sample_times=np.linspace(0, 0.8, 401))
    q = model.heater_coupling(CAV, cry) * w
    t = series.time
    on = np.clip(t - 0.1, 0, 0.3)
    expected = q / GAMMA * (1 - np.exp(-GAMMA * on)) * np.exp(-GAMMA * np.clip(t - 0.4, 0, None))
    np.testing.assert_allclose(series.xi, expected, atol=1e-9)
    assert q == pytest.approx(KAPPA * 1e-5 * 0.01 / 0.01 * w, rel=1e-14)


def test_custom_samples_match_constant_velocity():
    cry = make_crystal(GAMMA, 2 * GAMMA)
    v, x0, t1 = 0.5 * GAMMA / KAPPA, -5.0 / KAPPA, 8.0 / GAMMA
    ts = np.linspace(0, t1, 201)
    a = dynamics.integrate_detuning_ode(CAV, cry, OperatingPoint(0.6, 0), DriveProfile.constant_velocity(v, x0),
                                        (0, t1), SOLVER, sample_times=ts)
    b = dynamics.integrate_detuning_ode(CAV, cry, OperatingPoint(0.6, 0),
                                        DriveProfile.custom_samples([0, t1], [x0, x0 + v * t1]),
                                        (0, t1), SOLVER, sample_times=ts)
    np.testing.assert_allclose(a.xi, b.xi, atol=1e-8)
    np.testing.assert_allclose(a.x_act, b.x_act, rtol=1e-14, atol=1e-24)


def _nonlinear_run(settings):
    cry = make_crystal(GAMMA, 5 * GAMMA)
    drive = DriveProfile.sinusoid(3.0 / KAPPA, 2 * GAMMA, bias=-1.0 / KAPPA)
    return dynamics.integrate_detuning_ode(CAV, cry, OperatingPoint(0.6, 0), drive, (0, 6 / GAMMA), settings)


def test_convergence_under_halved_tolerances():
    base = SolverSettings()
    a = _nonlinear_run(base)
    b = _nonlinear_run(base.halved())
    tol = base.atol + base.rtol * np.abs(a.xi)
    assert np.all(np.abs(a.xi - b.xi) < 10 * tol)


def test_integration_deterministic():
    a, b = _nonlinear_run(SOLVER), _nonlinear_run(SOLVER)
    assert a.xi.tobytes() == b.xi.tobytes()


def test_x_th_reconstruction_identity():
    s = _nonlinear_run(SOLVER)
    scale = math.pi * SPEED_OF_LIGHT / (2 * CAV.finesse * CAV.carrier_angular_frequency)
    recon = scale * s.xi - s.x_act
    np.testing.assert_allclose(s.x_th, recon, rtol=1e-12, atol=1e-12 * np.max(np.abs(s.x_act)))
    state = s[17]
    assert state.transmitted_power_normalized == pytest.approx(1 / (1 + state.xi**2))
    assert 0 < state.transmitted_power_normalized <= 1
    assert set(s.columns()) == {"time_s", "xi", "x_act_m", "x_th_m", "p_trans_norm"}


def test_time_series_rejects_unordered_time():
    with pytest.raises(ValueError):
        dynamics.TimeSeries(np.array([0.0, 0.0]), np.zeros(2), np.zeros(2), np.zeros(2))


def test_drive_profile_validation():
    with pytest.raises(ValueError):
        DriveProfile.heater_step(1.0, 5.0, 2.0)
    with pytest.raises(ValueError):
        DriveProfile.custom_samples([1.0, 0.5], [0, 0])
    with pytest.raises(ValueError):
        DriveProfile.sinusoid(math.inf, 1.0)


# --- scans ------------------------------------------------------------------------------

SCAN_V = 0.5 * GAMMA / KAPPA


def test_scan_without_expansion_symmetric_and_mirrored():
    cry = no_expansion()
    fwd = dynamics.simulate_scan(CAV, cry, 0.6, SCAN_V, samples=4001)
    bwd = dynamics.simulate_scan(CAV, cry, 0.6, -SCAN_V, samples=4001)
    p = fwd.transmitted_power
    np.testing.assert_allclose(p, p[::-1], atol=1e-7)
    np.testing.assert_allclose(bwd.transmitted_power, p[::-1], atol=1e-7)
    np.testing.assert_allclose(bwd.transmitted_power, p, atol=1e-7)
    assert p.max() <= 1.0


def test_scan_without_expansion_is_lagged_lorentzian():
    # with constant u' the steady response is xi = u(t) exactly: xi' = -g(xi - u) + u'
    cry = no_expansion()
    s = dynamics.simulate_scan(CAV, cry, 0.6, SCAN_V, samples=2001)
    u = KAPPA * s.x_act
    np.testing.assert_allclose(s.xi, u, atol=1e-7)
    f = dynamics.scan_features(s)
    assert f.half_max_width == pytest.approx(2.0 / (KAPPA * SCAN_V), rel=1e-4)


def test_scan_figure1b_normalization():
    s = dynamics.simulate_scan(CAV, no_expansion(), 0.6, SCAN_V, normalization="figure1b", samples=2001)
    f = dynamics.scan_features(s)
    assert f.half_max_width == pytest.approx(2.0, rel=1e-4)  # half-width 1 on each side
    assert f.peak_time == pytest.approx(0.0, abs=1e-2)
    assert f.peak_power == pytest.approx(1.0, abs=1e-6)


def test_scan_rejects_zero_velocity():
    with pytest.raises(ValueError):
        dynamics.simulate_scan(CAV, no_expansion(), 0.6, 0.0)


def test_scan_asymmetry_direction():
    cry = make_crystal(GAMMA, 2 * GAMMA)
    v = 0.3 * GAMMA / KAPPA
    pos = dynamics.scan_features(dynamics.simulate_scan(CAV, cry, 0.6, v, samples=8001))
    neg = dynamics.scan_features(dynamics.simulate_scan(CAV, cry, 0.6, -v, samples=8001))
    free = 2.0 / (KAPPA * v)
    assert pos.half_max_width < free
    assert neg.time_to_resonance > pos.time_to_resonance
    assert max(pos.peak_power, neg.peak_power) <= 1.0


# --- self-locking --------------------------------------------------------------------------

LOCK_GAMMA = TWO_PI * 0.05
LOCK_CRY = make_crystal(LOCK_GAMMA, 5 * LOCK_GAMMA)
LOCK_BIAS = -3.0 / KAPPA


def _lock_heater(cry=LOCK_CRY):
    w = 6 * LOCK_GAMMA / model.heater_coupling(CAV, cry)
    return DriveProfile.heater_step(w, 60.0, 79.0, bias=LOCK_BIAS)


def test_selflock_equilibria_match_root_finder():
    a = model.thermal_drive(CAV, LOCK_CRY, 0.6)
    u = KAPPA * LOCK_BIAS

    def g(x):
        return LOCK_GAMMA * (x - u) - a / (1 + x * x)

    grid = np.linspace(-20, 20, 40001)
    vals = g(grid)
    brackets = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    oracle = [brentq(g, grid[i], grid[i + 1], xtol=1e-14) for i in brackets]
    roots = dynamics.selflock_equilibria(CAV, LOCK_CRY, 0.6, LOCK_BIAS)
    np.testing.assert_allclose(roots, oracle, atol=1e-10)
    assert len(roots) == 3


def test_selflock_unbiased_equilibrium_condition():
    # with no actuator bias the equilibrium solves g xi = A / (1 + xi^2)
    a = model.thermal_drive(CAV, LOCK_CRY, 0.6)
    roots = dynamics.selflock_equilibria(CAV, LOCK_CRY, 0.6)
    oracle = brentq(lambda x: LOCK_GAMMA * x - a / (1 + x * x), 0.0, 10.0, xtol=1e-14)
    np.testing.assert_allclose(roots, [oracle], atol=1e-10)


def test_selflock_four_phases():
    res = dynamics.simulate_selflock(CAV, LOCK_CRY, 0.6, _lock_heater(), (0.0, 300.0))
    s = res.series
    t, xi = s.time, s.xi
    # 1. off resonance and stationary before heating
    pre = t < 60
    assert np.all(np.abs(xi[pre] - res.pre_heating_xi) < 1e-6)
    assert np.all(s.transmitted_power[pre] < 0.25)
    # 2. heating sweeps the detuning towards and past resonance
    heat = (t >= 60) & (t < 79)
    assert xi[heat][-1] > xi[heat][0] + 2
    # 3. relaxation after the heater, 4. settled on a stable equilibrium near resonance
    assert res.locked and res.stable
    assert res.equilibrium_xi == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-6)
    assert res.lock_time is not None and res.lock_time > 79
    assert s.transmitted_power[-1] > 0.7
    assert res.stability_slope < 0


def test_selflock_without_absorption_relaxes_back():
    cry = no_absorption(LOCK_GAMMA)
    res = dynamics.simulate_selflock(CAV, cry, 0.6, _lock_heater(cry), (0.0, 300.0))
    assert not res.locked
    assert res.final_xi == pytest.approx(res.pre_heating_xi, abs=1e-3)
    assert res.series.xi.max() > res.pre_heating_xi + 2  # the heater did move it


def test_selflock_requires_heater_inside_span():
    with pytest.raises(ValueError):
        dynamics.simulate_selflock(CAV, LOCK_CRY, 0.6, _lock_heater(), (0.0, 70.0))


# --- small-signal probe ---------------------------------------------------------------------

PROBE_GAMMA = TWO_PI * 30.0
PROBE_CRY = make_crystal(PROBE_GAMMA, PROBE_GAMMA)
PROBE_OP = OperatingPoint(0.6, 1.0)
PROBE_AMP = 0.01 / KAPPA


def test_probe_without_absorption_is_unity():
    cry = no_absorption(PROBE_GAMMA)
    for omega in (0.3 * PROBE_GAMMA, 3 * PROBE_GAMMA, 30 * PROBE_GAMMA):
        h = dynamics.probe_small_signal(CAV, cry, PROBE_OP, omega, PROBE_AMP)
        assert abs(h - 1) < 1e-3


@pytest.mark.parametrize("ratio", [0.2, 1.0, 7.0])
def test_probe_matches_linear_model(ratio):
    omega = ratio * PROBE_GAMMA
    h = dynamics.probe_small_signal(CAV, PROBE_CRY, PROBE_OP, omega, PROBE_AMP)
    ref = model.cavity_optical_response(model.photothermal_rates(CAV, PROBE_CRY, PROBE_OP), omega)
    assert abs(abs(h) / abs(ref) - 1) < 0.01
    assert abs(np.degrees(np.angle(h / ref))) < 1.0


def test_probe_amplitude_halving_certificate():
    omega = PROBE_GAMMA
    full = dynamics.probe_small_signal(CAV, PROBE_CRY, PROBE_OP, omega, PROBE_AMP)
    half = dynamics.probe_small_signal(CAV, PROBE_CRY, PROBE_OP, omega, PROBE_AMP / 2)
    assert abs(half / full - 1) < 2e-3


def test_probe_linearity_guard():
    with pytest.raises(LinearityGuardError, match="smaller amplitude"):
        dynamics.probe_small_signal(CAV, PROBE_CRY, PROBE_OP, PROBE_GAMMA, 0.5 / KAPPA)


def test_probe_rejects_unstable_operating_point():
    cry = make_crystal(PROBE_GAMMA, 5 * PROBE_GAMMA)
    op = OperatingPoint(0.6, -1.0)  # omega_th = -2.5 gamma
    assert model.photothermal_rates(CAV, cry, op).pole < 0
    with pytest.raises(DomainError):
        dynamics.probe_small_signal(CAV, cry, op, PROBE_GAMMA, PROBE_AMP)


def test_actuator_bias_makes_operating_point_stationary():
    x = dynamics.actuator_bias(CAV, PROBE_CRY, PROBE_OP)
    a = model.thermal_drive(CAV, PROBE_CRY, 0.6)
    xi0 = PROBE_OP.stationary_detuning
    assert -PROBE_GAMMA * xi0 + a / (1 + xi0**2) + PROBE_GAMMA * KAPPA * x == pytest.approx(0.0, abs=1e-9)


def test_probe_sweep_returns_frequency_response():
    omegas = PROBE_GAMMA * np.array([0.5, 2.0])
    fr = dynamics.probe_sweep(CAV, PROBE_CRY, PROBE_OP, omegas, PROBE_AMP)
    assert fr.quantity == "cavity_optical_response"
    ref = model.cavity_optical_response(PhotothermalRates(0.5 * PROBE_GAMMA, PROBE_GAMMA), omegas)
    np.testing.assert_allclose(fr.values, ref, rtol=1e-2)
