"""Monte Carlo estimates of ‖T(t)g − μ(g)‖² and empirical decay rates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import sampler
from .model import FiberModel


def _observable(g) -> Callable:
    fn = getattr(g, "value", g)
    if not callable(fn):
        raise TypeError("observable must be callable or expose .value(x, w)")
    return fn


def estimate_Ttg(m: FiberModel, g, x0, w0, t: float, inner_paths: int, dt: float,
                 seed: int, task_id: int = 0) -> tuple[float, float]:
    """(mean, SE) of g(X_t, ω_t) over ``inner_paths`` paths from (x0, w0)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    fn = _observable(g)
    x = np.tile(np.asarray(x0, dtype=float), (inner_paths, 1))
    w = np.tile(np.asarray(w0, dtype=float), (inner_paths, 1))
    if t > 0:
        x, w = sampler.propagate_ensemble(m, x, w, t, dt, seed, task_id)
    vals = np.asarray(fn(x, w), dtype=float)
    if inner_paths < 2 or np.ptp(vals) == 0.0:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(inner_paths))


@dataclass
class DecayCurve:
    times: np.ndarray
    estimate: np.ndarray  # raw squared-norm estimate
    se: np.ndarray  # standard error of the corrected estimate
    corrected: np.ndarray  # bias-corrected squared norm
    bound: np.ndarray  # squared certified envelope (nan without a certificate)
    clipped: np.ndarray  # corrected estimate was negative and set to 0
    mean_shift: np.ndarray  # μ̂(T(t)g) − μ̂(g)
    mean_shift_se: np.ndarray
    params: dict = field(default_factory=dict)
    rate: Optional[float] = None
    intercept: Optional[float] = None
    ci: Optional[tuple] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "estimate", "se", "corrected", "bound"])
        for row in zip(self.times, self.estimate, self.se, self.corrected, self.bound):
            wr.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def envelope_excess(self) -> np.ndarray:
        """(corrected − bound)/SE; ≤ 3 everywhere means the bound holds."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, (self.corrected - self.bound) / self.se,
                            np.where(self.corrected > self.bound, np.inf, -np.inf))


def decay_curve(m: FiberModel, g, times, outer_points: int = 512, inner_paths: int = 256,
                dt: float = 1e-3, seed: int = 0, cert=None, batch_outer: int = 64) -> DecayCurve:
    """Nested Monte Carlo estimate of ‖T(t)g − μ(g)‖² at each time.

    Outer points are drawn from μ; from each, ``inner_paths`` trajectories
    estimate T(t)g.  The sample variance of those inner means over-counts by
    the average inner variance, which is subtracted.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or np.any(times < 0):
        raise ValueError("times must be increasing and nonnegative")
    fn = _observable(g)
    x_out, w_out = sampler.sample_equilibrium(m, sampler.stream(seed, 0, 0), outer_points)
    means = np.empty((times.size, outer_points))
    inner_var = np.empty((times.size, outer_points))
    for b, start in enumerate(range(0, outer_points, batch_outer)):
        stop = min(start + batch_outer, outer_points)
        k = stop - start
        x0 = np.repeat(x_out[start:stop], inner_paths, axis=0)
        w0 = np.repeat(w_out[start:stop], inner_paths, axis=0)
        obs = sampler.propagate_ensemble(
            m, x0, w0, times.max(), dt, seed, 1 + b,
            observe=lambda x, w: np.asarray(fn(x, w), dtype=float), obs_times=times,
        ).reshape(times.size, k, inner_paths)
        means[:, start:stop] = obs.mean(axis=2)
        inner_var[:, start:stop] = obs.var(axis=2, ddof=1) / inner_paths if inner_paths > 1 else 0.0

    n = outer_points
    centred = means - means.mean(axis=1, keepdims=True)
    raw = (centred**2).sum(axis=1) / (n - 1)
    corr = raw - inner_var.mean(axis=1)
    terms = centred**2 * n / (n - 1) - inner_var
    se = terms.std(axis=1, ddof=1) / np.sqrt(n)
    clipped = corr < 0
    corr = np.where(clipped, 0.0, corr)
    g0 = np.asarray(fn(x_out, w_out), dtype=float)
    # paired differences: μ̂(T(t)g) − μ̂(g) from the same outer points
    diff = means - g0[None, :]
    shift = diff.mean(axis=1)
    shift_se = diff.std(axis=1, ddof=1) / np.sqrt(n)
    if cert is not None:
        bound = (cert.kappa1 * np.exp(-cert.kappa2 * times)) ** 2 * g0.var(ddof=1)
    else:
        bound = np.full(times.size, np.nan)
    params = {"outer_points": outer_points, "inner_paths": inner_paths, "dt": dt, "seed": seed,
              "d": m.d, "sigma": m.sigma, "potential": m.potential.name}
    return DecayCurve(times, raw, se, corr, bound, clipped, shift, shift_se, params)


@dataclass
class RateFit:
    rate: float
    intercept: float
    ci: tuple
    points: int


def fit_rate(times, values, se, level: float = 0.95) -> RateFit:
    """Weighted least squares of log(values) against t.

    ``values`` are squared norms, so the reported rate is −slope/2.  Weights
    are (value/SE)², the delta-method inverse variance of log(value).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    se = np.asarray(se, dtype=float)
    ok = values > 0
    if ok.sum() < 4:
        raise ValueError("need at least 4 time points with positive estimates")
    t, y, s = times[ok], np.log(values[ok]), se[ok]
    rel = np.where(s > 0, s / values[ok], np.nan)
    if np.all(np.isnan(rel)):
        w = np.ones_like(t)
    else:
        floor = np.nanmin(rel[rel > 0]) if np.any(rel > 0) else 1.0
        w = 1.0 / np.where(np.isnan(rel) | (rel <= 0), floor, rel) ** 2
    X = np.column_stack([np.ones_like(t), t])
    XtW = X.T * w
    cov_unscaled = np.linalg.inv(XtW @ X)
    beta = cov_unscaled @ (XtW @ y)
    resid = y - X @ beta
    dof = t.size - 2
    s2 = float(np.sum(w * resid**2) / dof)
    slope_se = np.sqrt(s2 * cov_unscaled[1, 1])
    q = stats.t.ppf(0.5 + level / 2.0, dof)
    rate = -beta[1] / 2.0
    half = q * slope_se / 2.0
    return RateFit(float(rate), float(beta[0]), (float(rate - half), float(rate + half)), int(t.size))


def fit_curve(curve: DecayCurve, level: float = 0.95) -> RateFit:
    fit = fit_rate(curve.times, curve.corrected, curve.se, level)
    curve.rate, curve.intercept, curve.ci = fit.rate, fit.intercept, fit.ci
    return fit


# observables --------------------------------------------------------------


def omega_component(i: int):
    return lambda x, w: w[..., i]


def windowed_x(i: int, scale: float = 1.0):
    """x_i clipped smoothly: scale·tanh(x_i/scale)."""
    return lambda x, w: scale * np.tanh(x[..., i] / scale)
