"""Equilibrium sampling and time stepping of the spherical velocity SDE.

The velocity equation is integrated with an Euler step followed by
renormalization onto the sphere.  Ensembles are vectorized: a batch of paths
shares one array, and each batch draws from its own generator seeded by
``(seed, batch_id)`` so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .model import FiberModel, Potential

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-8


class StepSizeError(RuntimeError):
    """The projected Euler step left the sphere's neighbourhood."""


def stream(seed: int, *ids: int) -> np.random.Generator:
    """Independent generator for the task identified by ``(seed, *ids)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, ids)])


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.omega, dtype=float)
        if x.shape != w.shape or x.ndim != 1:
            raise ValueError("x and omega must be vectors of equal length")
        if abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise ValueError("omega must be a unit vector")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "omega", w)


@dataclass(frozen=True)
class SdeConfig:
    dt: float
    steps: int
    seed: int
    stride: int = 1
    scheme: str = "project-euler"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0 or self.stride < 1:
            raise ValueError("steps must be >= 0 and stride >= 1")
        if self.scheme != "project-euler":
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass
class Trajectory:
    times: np.ndarray  # (n,)
    x: np.ndarray  # (n, d)
    omega: np.ndarray  # (n, d)

    def to_csv(self) -> str:
        d = self.x.shape[1]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + [f"omega_{i + 1}" for i in range(d)])
        for t, x, w in zip(self.times, self.x, self.omega):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in w])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# equilibrium


def sample_sphere_uniform(d: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform samples on S^{d-1}; shape ``(d,)`` or ``(size, d)``."""
    if d < 2:
        raise ValueError("d >= 2 required")
    n = 1 if size is None else int(size)
    g = rng.standard_normal((n, d))
    r = np.linalg.norm(g, axis=1)
    bad = r == 0.0
    while np.any(bad):  # practically unreachable, but keep the contract
        g[bad] = rng.standard_normal((int(bad.sum()), d))
        r = np.linalg.norm(g, axis=1)
        bad = r == 0.0
    out = g / r[:, None]
    return out[0] if size is None else out


@dataclass
class MalaDiagnostics:
    acceptance: float
    step: float
    ok: bool


def sample_equilibrium_x(pot: Potential, rng: np.random.Generator, size: int = 1,
                         method: str = "auto", mala_step: float = 0.5,
                         mala_burn: int = 500, return_diagnostics: bool = False):
    """Samples from e^{-V}dx.

    Quadratic potentials are sampled exactly (x_i ~ N(0, 1/(2a_i))), as is
    the flat torus (uniform).  Other
    potentials, or ``method="mala"``, run ``size`` parallel MALA chains for
    ``mala_burn`` steps and return their final states.
    """
    flat_torus = pot.periodic and pot.params.get("amplitude", None) == 0.0
    if method == "auto":
        method = "direct" if (pot.name == "quadratic" or flat_torus) else "mala"
    if method == "direct":
        if pot.name == "quadratic":
            a = np.asarray(pot.params["a"], dtype=float)
            x = rng.standard_normal((size, a.size)) / np.sqrt(2.0 * a)
        elif flat_torus:
            x = rng.uniform(0.0, 2.0 * np.pi, (size, pot.dim))
        else:
            raise ValueError("direct sampling needs a quadratic potential or the flat torus")
        diag = MalaDiagnostics(1.0, 0.0, True)
    elif method == "mala":
        x, diag = _mala(pot, rng, size, mala_step, mala_burn)
    else:
        raise ValueError(f"unknown method {method!r}")
    if pot.periodic:
        x = np.mod(x, 2.0 * np.pi)
    return (x, diag) if return_diagnostics else x


MALA_TARGET = 0.574


def _mala(pot: Potential, rng, size, step, burn):
    """Parallel MALA chains; the step adapts during the first half of burn-in."""
    d = pot.dim
    if pot.periodic:
        x = rng.uniform(0.0, 2.0 * np.pi, (size, d))
    else:
        x = rng.standard_normal((size, d))
    v = pot.value(x)
    g = pot.gradient(x)
    adapt = burn // 2
    accepted = 0
    for k in range(burn):
        prop = x - step * g + np.sqrt(2.0 * step) * rng.standard_normal(x.shape)
        vp = pot.value(prop)
        gp = pot.gradient(prop)
        fwd = np.sum((prop - x + step * g) ** 2, axis=1) / (4.0 * step)
        bwd = np.sum((x - prop + step * gp) ** 2, axis=1) / (4.0 * step)
        acc = np.log(rng.uniform(size=size)) < -(vp - v) - bwd + fwd
        x = np.where(acc[:, None], prop, x)
        v = np.where(acc, vp, v)
        g = np.where(acc[:, None], gp, g)
        if k < adapt:
            step *= float(np.exp(acc.mean() - MALA_TARGET))
        else:
            accepted += int(acc.sum())
    rate = accepted / max(1, size * (burn - adapt))
    ok = 0.2 <= rate <= 0.8
    if not ok:
        log.warning("MALA acceptance rate %.3f outside [0.2, 0.8]", rate)
    return x, MalaDiagnostics(rate, step, ok)


def sample_equilibrium(m: FiberModel, rng: np.random.Generator, size: int, **kw):
    """Joint samples (x, ω) ~ μ = e^{-V}dx ⊗ ν."""
    x = sample_equilibrium_x(m.potential, rng, size, **kw)
    w = sample_sphere_uniform(m.d, rng, size)
    return x, w


# ---------------------------------------------------------------------------
# dynamics


def sde_step(m: FiberModel, x, omega, dt: float, rng: np.random.Generator):
    """One projected Euler step; accepts single points or batches ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(omega, dtype=float)
    d = m.d
    # drift and noise share the tangent projection, so project their sum once
    inc = rng.standard_normal(w.shape)
    inc *= m.sigma * np.sqrt(dt)
    inc -= (dt / (d - 1)) * m.potential.gradient(x)
    wt = w + inc
    wt -= w * np.einsum("...i,...i->...", w, inc)[..., None]
    r = np.sqrt(np.einsum("...i,...i->...", wt, wt))[..., None]
    if np.any(r < NORM_FLOOR):
        raise StepSizeError("velocity update collapsed to ~0; reduce dt")
    x_new = x + dt * w
    if m.potential.periodic:
        x_new = np.mod(x_new, 2.0 * np.pi)
    return x_new, wt / r


def _check_dt(m: FiberModel, dt: float):
    if dt * m.sigma**2 > 0.1:
        warnings.warn(f"dt*sigma^2 = {dt * m.sigma**2:.3g} exceeds 0.1", RuntimeWarning, stacklevel=3)


def simulate(m: FiberModel, p0: PhasePoint, cfg: SdeConfig) -> Trajectory:
    """Single trajectory recorded every ``cfg.stride`` steps."""
    _check_dt(m, cfg.dt)
    if p0.x.size != m.d:
        raise ValueError("initial point has wrong dimension")
    rng = stream(cfg.seed, 0)
    x, w = p0.x.copy(), p0.omega.copy()
    ts, xs, ws = [0.0], [x.copy()], [w.copy()]
    for k in range(1, cfg.steps + 1):
        x, w = sde_step(m, x, w, cfg.dt, rng)
        if k % cfg.stride == 0:
            ts.append(k * cfg.dt)
            xs.append(x.copy())
            ws.append(w.copy())
    return Trajectory(np.array(ts), np.array(xs), np.array(ws))


def propagate_ensemble(m: FiberModel, x0, w0, t: float, dt: float, seed: int,
                       batch_id: int = 0, observe=None, obs_times=None):
    """Advance a batch of paths to time t with one RNG stream.

    If ``observe`` is given it is evaluated on ``(x, ω)`` at each time in
    ``obs_times`` (which must be multiples of dt up to rounding) and the
    stacked observations are returned instead of final states.
    """
    _check_dt(m, dt)
    rng = stream(seed, batch_id)
    x = np.array(x0, dtype=float)
    w = np.array(w0, dtype=float)
    nsteps = int(round(t / dt))
    if observe is None:
        for _ in range(nsteps):
            x, w = sde_step(m, x, w, dt, rng)
        return x, w
    marks = {int(round(s / dt)): i for i, s in enumerate(obs_times)}
    out = [None] * len(obs_times)
    if 0 in marks:
        out[marks[0]] = observe(x, w)
    last = max(marks)
    for k in range(1, last + 1):
        x, w = sde_step(m, x, w, dt, rng)
        if k in marks:
            out[marks[k]] = observe(x, w)
    return np.stack(out)


def autocorrelation(m: FiberModel, times, n_paths: int, dt: float, seed: int,
                    batch: int = 20000):
    """E[ω_t·ω_0] from ω_0 uniform and x_0 = 0; returns (mean, SE) per t.

    Meant for ∇V ≡ 0, where the velocity decouples from the position.
    """
    times = np.asarray(times, dtype=float)
    acc = []
    for b, start in enumerate(range(0, n_paths, batch)):
        n = min(batch, n_paths - start)
        w0 = sample_sphere_uniform(m.d, stream(seed, 1_000_000 + b), n)
        obs = propagate_ensemble(m, np.zeros((n, m.d)), w0, times.max(), dt, seed, b,
                                 observe=lambda x, w, w0=w0: np.sum(w * w0, axis=-1),
                                 obs_times=times)
        acc.append(obs)
    vals = np.concatenate(acc, axis=1)
    return vals.mean(axis=1), vals.std(axis=1, ddof=1) / np.sqrt(vals.shape[1])
