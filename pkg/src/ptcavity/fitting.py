"""Weighted nonlinear least squares on transfer-function phase.

The optimizer is a damped Gauss-Newton (Levenberg-Marquardt) iteration in
parameters scaled by their initial magnitudes.  Residuals are in degrees and
are wrapped into (-180, 180], so a dataset's absolute 360-degree offset
never matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError

#: Condition number of the column-normalized normal matrix above which a fit
#: is reported as non-identifiable.
IDENTIFIABILITY_CONDITION = 1e12


@dataclass
class ResponseDataset:
    """Measured or synthetic transfer-function samples.

    ``band`` restricts which points a fit uses; ``mechanics`` and
    ``gamma_th`` carry knowns that a pipeline holds fixed.
    """

    freq_hz: np.ndarray
    phase_deg: np.ndarray
    magnitude: Optional[np.ndarray] = None
    phase_sigma_deg: Optional[np.ndarray] = None
    band: tuple = (0.0, math.inf)
    mechanics: object = None
    gamma_th: Optional[float] = None  # rad/s
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.phase_deg = np.asarray(self.phase_deg, dtype=float)
        n = self.freq_hz.shape
        if self.freq_hz.ndim != 1 or self.phase_deg.shape != n:
            raise DataError("freq_hz and phase_deg must be 1-D arrays of equal length")
        if np.any(self.freq_hz <= 0) or np.any(np.diff(self.freq_hz) <= 0):
            raise DataError("frequencies must be positive and strictly increasing")
        if not np.all(np.isfinite(self.phase_deg)):
            raise DataError("phases must be finite")
        if self.magnitude is not None:
            self.magnitude = np.asarray(self.magnitude, dtype=float)
            if self.magnitude.shape != n or np.any(self.magnitude <= 0):
                raise DataError("magnitudes must be positive and match the frequencies")
        if self.phase_sigma_deg is not None:
            self.phase_sigma_deg = np.asarray(self.phase_sigma_deg, dtype=float)
            if self.phase_sigma_deg.shape != n or np.any(~(self.phase_sigma_deg > 0)):
                raise DataError("phase sigmas must be positive and match the frequencies")
        lo, hi = self.band
        if not lo < hi:
            raise DataError("band must satisfy f_min < f_max")

    @property
    def omega(self):
        return 2.0 * np.pi * self.freq_hz

    def __len__(self):
        return len(self.freq_hz)

    def in_band(self, band=None):
        """Copy restricted to ``band`` (defaults to the dataset's own)."""
        lo, hi = band if band is not None else self.band
        keep = (self.freq_hz >= lo) & (self.freq_hz <= hi)

        def pick(a):
            return None if a is None else a[keep]

        return ResponseDataset(
            self.freq_hz[keep], self.phase_deg[keep], pick(self.magnitude), pick(self.phase_sigma_deg),
            (lo, hi), self.mechanics, self.gamma_th, dict(self.metadata),
        )


def wrap_deg(x):
    """Map angles to (-180, 180]."""
    return 180.0 - np.mod(180.0 - np.asarray(x, dtype=float), 360.0)


def unwrap_phase(phase_deg, reference_deg=None):
    """Remove 360-degree jumps, continuing from the lowest frequency.

    Each point is moved by the multiple of 360 that brings it nearest its
    predecessor.  The first point is moved nearest ``reference_deg`` (e.g.
    the model prediction at the initial guess) when one is given.
    """
    phase = np.asarray(phase_deg, dtype=float).copy()
    if phase.size == 0:
        return phase
    if reference_deg is not None:
        phase[0] = reference_deg + wrap_deg(phase[0] - reference_deg)
    for i in range(1, phase.size):
        phase[i] = phase[i - 1] + wrap_deg(phase[i] - phase[i - 1])
    return phase


@dataclass
class FitResult:
    names: tuple
    estimates: dict
    standard_errors: dict
    covariance: np.ndarray
    residuals: np.ndarray  # model - data, degrees (or the fit's own units)
    weights: np.ndarray
    iterations: int
    converged: bool
    identifiable: bool
    objective: float
    gradient_norm: float
    units: dict = field(default_factory=dict)
    message: str = ""
    normalized_rmse: Optional[float] = None

    @property
    def ok(self):
        return self.converged and self.identifiable

    def value(self, name):
        return self.estimates[name]

    def error(self, name):
        return self.standard_errors[name]

    def as_vector(self):
        return np.array([self.estimates[n] for n in self.names])

    def relative_error(self, name):
        return self.standard_errors[name] / abs(self.estimates[name])

    @property
    def rmse(self):
        return float(np.sqrt(np.mean(self.residuals**2))) if self.residuals.size else 0.0

    def summary(self):
        rows = {}
        for n in self.names:
            rows[n] = {"value": self.estimates[n], "stderr": self.standard_errors[n],
                       "unit": self.units.get(n, "")}
        return rows


def _phase_and_jacobian(model, omega, theta, fit_magnitude):
    value = model.evaluate(omega, theta)
    logjac = model.log_jacobian(omega, theta)  # d log M / d theta, shape (n, p)
    phase = np.degrees(np.angle(value))
    jac = np.degrees(logjac.imag)
    if fit_magnitude:
        # extra parameter: natural-log gain; ln|M| in nepers is put on the
        # same footing as phase in radians
        p = len(theta) - 1
        logmag = np.log(np.abs(value)) + theta[p]
        jm = np.hstack([logjac.real[:, :p], np.ones((len(omega), 1))])
        jp = np.hstack([jac[:, :p], np.zeros((len(omega), 1))])
        return phase, np.degrees(logmag), jp, np.degrees(jm)
    return phase, None, jac, None


def _residuals(model, omega, theta, data_phase, data_logmag, fit_magnitude):
    ph, lm, jp, jm = _phase_and_jacobian(model, omega, theta, fit_magnitude)
    r = wrap_deg(ph - data_phase)
    if fit_magnitude:
        return np.concatenate([r, lm - data_logmag]), np.vstack([jp, jm])
    return r, jp


def nls_fit(
    model,
    data: ResponseDataset,
    init,
    weights=None,
    *,
    scale=None,
    fit_magnitude=False,
    max_iter=200,
    ftol=1e-10,
    gtol=1e-8,
) -> FitResult:
    """Fit ``model`` to the phase (and optionally magnitude) of ``data``.

    ``model`` provides ``names``, ``units``, ``evaluate(omega, theta)`` and
    ``log_jacobian(omega, theta)`` (derivatives of the complex log of the
    response).  ``weights`` default to 1/sigma^2 when the dataset carries
    phase sigmas, else 1.  With ``fit_magnitude`` a free log-gain parameter
    named ``log_gain`` is appended to ``init``'s end.

    Standard errors come from the inverse Gauss-Newton Hessian scaled by
    the residual variance.  A fit whose normal matrix is numerically
    singular is flagged non-identifiable with zero standard errors.
    """
    theta = np.array(init, dtype=float)
    names = tuple(model.names) + (("log_gain",) if fit_magnitude else ())
    if fit_magnitude and theta.size == len(model.names):
        theta = np.append(theta, 0.0)
    p = theta.size
    if p != len(names):
        raise ValueError(f"expected {len(names)} initial values, got {p}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial parameters must be finite")
    omega = data.omega
    n = len(omega)
    n_res = 2 * n if fit_magnitude else n
    if fit_magnitude and data.magnitude is None:
        raise DataError("magnitude fitting needs magnitudes")
    if n_res < 2 * p:
        raise DataError(f"need at least {2 * p} residuals for {p} parameters, got {n_res}")

    if weights is None:
        w = 1.0 / data.phase_sigma_deg**2 if data.phase_sigma_deg is not None else np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per point")
    if fit_magnitude:
        w = np.concatenate([w, w])
    sqw = np.sqrt(w)

    logmag = np.degrees(np.log(data.magnitude)) if fit_magnitude else None
    ref = np.degrees(np.angle(model.evaluate(omega, theta)))
    data_phase = unwrap_phase(data.phase_deg, ref[0])

    if scale is None:
        scale = np.where(theta != 0, np.abs(theta), 1.0)
    scale = np.asarray(scale, dtype=float)
    if fit_magnitude and scale.size == p - 1:
        scale = np.append(scale, 1.0)

    def evaluate(th):
        r, j = _residuals(model, omega, th, data_phase, logmag, fit_magnitude)
        return r * sqw, j * sqw[:, None] * scale[None, :]

    def cosine_gradient(r, j):
        rn = np.linalg.norm(r)
        if rn == 0:
            return 0.0
        cn = np.linalg.norm(j, axis=0)
        cn[cn == 0] = 1.0
        return float(np.max(np.abs(j.T @ r) / (cn * rn)))

    r, j = evaluate(theta)
    obj = float(r @ r)
    lam = 1e-3
    converged = False
    message = "maximum iterations reached"
    it = 0
    while it < max_iter:
        it += 1
        gnorm = cosine_gradient(r, j)
        if gnorm < gtol:
            converged, message = True, "gradient below tolerance"
            break
        a = j.T @ j
        g = j.T @ r
        diag = np.diag(a).copy()
        diag[diag == 0] = 1.0
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + step * scale
            r_t, j_t = evaluate(trial)
            obj_t = float(r_t @ r_t)
            if np.isfinite(obj_t) and obj_t <= obj:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent possible at any damping: the floating-point minimum
            converged = cosine_gradient(r, j) < 1e-4
            message = "no further decrease possible" if converged else "step rejected at maximum damping"
            break
        decrease = obj - obj_t
        theta, r, j, obj = trial, r_t, j_t, obj_t
        lam = max(lam / 3.0, 1e-12)
        if obj == 0 or decrease <= ftol * obj:
            converged, message = True, "relative objective decrease below tolerance"
            break

    if not np.all(np.isfinite(theta)):
        converged, message = False, "diverged"
    elif converged:
        theta, r, j, obj = _polish(evaluate, theta, r, j, obj, scale)

    a = j.T @ j
    col = np.sqrt(np.diag(a))
    identifiable = bool(np.all(col > 0))
    cov = np.zeros((p, p))
    if identifiable:
        normed = a / np.outer(col, col)
        cond = np.linalg.cond(normed)
        identifiable = bool(np.isfinite(cond) and cond < IDENTIFIABILITY_CONDITION)
    if identifiable:
        dof = max(n_res - p, 1)
        s2 = obj / dof
        cov = s2 * np.linalg.inv(a) * np.outer(scale, scale)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if not identifiable:
        message += "; parameters not identifiable"

    residuals = r / np.where(sqw > 0, sqw, 1.0)
    units = dict(getattr(model, "units", {}))
    if fit_magnitude:
        units["log_gain"] = "1"
    return FitResult(
        names=names,
        estimates={k: float(v) for k, v in zip(names, theta)},
        standard_errors={k: float(v) for k, v in zip(names, se)},
        covariance=cov,
        residuals=residuals,
        weights=w,
        iterations=it,
        converged=bool(converged),
        identifiable=identifiable,
        objective=obj,
        gradient_norm=cosine_gradient(r, j),
        units=units,
        message=message,
    )


def _polish(evaluate, theta, r, j, obj, scale, max_steps=12):
    """Undamped Gauss-Newton steps down to the floating-point minimum.

    Makes a converged fit a fixed point: refitting from it moves nothing.
    Near the minimum the objective is flat to rounding, so steps are
    accepted while they keep shrinking rather than on objective decrease.
    """
    last = math.inf
    for _ in range(max_steps):
        step, *_ = np.linalg.lstsq(j, -r, rcond=None)
        size = float(np.max(np.abs(step)))
        if not size < last:
            break
        trial = theta + step * scale
        if np.array_equal(trial, theta):
            break
        r_t, j_t = evaluate(trial)
        obj_t = float(r_t @ r_t)
        if not (np.isfinite(obj_t) and obj_t <= obj * (1.0 + 1e-12)):
            break
        theta, r, j, obj, last = trial, r_t, j_t, obj_t, size
        if size <= 1e-15:
            break
    return theta, r, j, obj


def linear_weighted_fit(x, y, sigma):
    """Weighted least squares of y = b * x (single slope, no intercept).

    Returns (b, sigma_b, residuals) with sigma_b = 1/sqrt(sum w x^2) from
    the supplied per-point sigmas.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("sigmas must be positive")
    w = 1.0 / sigma**2
    sxx = float(np.sum(w * x * x))
    if sxx == 0:
        raise ValueError("degenerate design: all regressors are zero")
    b = float(np.sum(w * x * y)) / sxx
    return b, 1.0 / math.sqrt(sxx), b * x - y
