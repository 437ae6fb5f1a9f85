"""Adaptive Dormand-Prince 5(4) integrator for a scalar ODE.

The detuning equation has a single state variable, so the stepper works on
plain Python floats; numpy per-step overhead would dominate otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import IntegrationError

# Butcher tableau, fifth-order weights and error weights (b5 - b4).
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and step limits.

    ``max_step`` of None lets the caller pick a problem-dependent bound.
    ``sample_interval`` is the output stride in seconds (None: caller default).
    """

    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: Optional[float] = None
    sample_interval: Optional[float] = None
    max_steps: int = 50_000_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_step is not None and not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.sample_interval is not None and not self.sample_interval > 0:
            raise ValueError("sample_interval must be positive")

    def halved(self):
        """Same settings with both tolerances halved (convergence checks)."""
        return SolverSettings(self.rtol / 2, self.atol / 2, self.max_step, self.sample_interval, self.max_steps)


def _initial_step(f, t0, y0, f0, rtol, atol, max_step, span):
    scale = atol + rtol * abs(y0)
    d0 = abs(y0) / scale
    d1 = abs(f0) / scale
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, max_step, span)
    y1 = y0 + h0 * f0
    d2 = abs(f(t0 + h0, y1) - f0) / scale / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, max_step, span)


def dopri5(
    f: Callable[[float, float], float],
    t0: float,
    y0: float,
    t_end: float,
    sample_times: Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-10,
    max_step: float = math.inf,
    first_step: Optional[float] = None,
    max_steps: int = 50_000_000,
):
    """Integrate dy/dt = f(t, y) from ``t0`` to ``t_end``.

    Steps are clipped so that every entry of ``sample_times`` (sorted, inside
    ``[t0, t_end]``) is hit exactly; the returned array holds y at those
    times.  Returns ``(samples, y_end, last_step)``.

    Raises IntegrationError when the step size underflows or the state
    becomes non-finite.
    """
    samples = np.empty(len(sample_times))
    n_samples = len(sample_times)
    k = 0
    t = float(t0)
    y = float(y0)
    while k < n_samples and sample_times[k] <= t:
        samples[k] = y
        k += 1
    if k < n_samples and sample_times[-1] > t_end:
        raise ValueError("sample times must lie inside the integration span")
    if t_end <= t:
        return samples, y, 0.0

    f1 = f(t, y)
    if first_step is None:
        h = _initial_step(f, t, y, f1, rtol, atol, max_step, t_end - t)
    else:
        h = min(first_step, max_step)
    steps = 0
    while t < t_end:
        target = sample_times[k] if k < n_samples else t_end
        clipped = False
        step = h
        if step <= 16.0 * math.ulp(max(abs(t), 1e-300)):
            raise IntegrationError("step size underflow", t)
        # stretch by up to 10% rather than leave a sliver before the target
        if t + 1.1 * step >= target:
            step = target - t
            clipped = True

        f2 = f(t + _C2 * step, y + step * _A21 * f1)
        f3 = f(t + _C3 * step, y + step * (_A31 * f1 + _A32 * f2))
        f4 = f(t + _C4 * step, y + step * (_A41 * f1 + _A42 * f2 + _A43 * f3))
        f5 = f(t + _C5 * step, y + step * (_A51 * f1 + _A52 * f2 + _A53 * f3 + _A54 * f4))
        f6 = f(t + step, y + step * (_A61 * f1 + _A62 * f2 + _A63 * f3 + _A64 * f4 + _A65 * f5))
        y_new = y + step * (_B1 * f1 + _B3 * f3 + _B4 * f4 + _B5 * f5 + _B6 * f6)
        t_new = target if clipped else t + step
        f7 = f(t_new, y_new)
        err = step * (_E1 * f1 + _E3 * f3 + _E4 * f4 + _E5 * f5 + _E6 * f6 + _E7 * f7)
        scale = atol + rtol * max(abs(y), abs(y_new))
        ratio = abs(err) / scale

        if not math.isfinite(y_new) or not math.isfinite(ratio):
            h = step * _MIN_FACTOR
            if h <= 16.0 * math.ulp(max(abs(t), 1e-300)):
                raise IntegrationError("non-finite state", t)
            continue

        if ratio <= 1.0:
            t, y, f1 = t_new, y_new, f7
            if clipped and k < n_samples and t == sample_times[k]:
                samples[k] = y
                k += 1
            factor = _MAX_FACTOR if ratio == 0 else min(_MAX_FACTOR, _SAFETY * ratio ** -0.2)
            # a clipped step says nothing about how large the next one may be
            h = min(max(h, step * factor) if clipped else step * factor, max_step)
        else:
            h = step * max(_MIN_FACTOR, _SAFETY * ratio ** -0.2)
        steps += 1
        if steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
    return samples, y, h
