"""Finite-difference solvers on the periodic grid for the transport equation,
its exponentially tilted version, and the stochastic heat equation.

The transport term is discretized in conservative (flux) form so that the
untilted equation preserves total mass exactly per step; with the zeroth-order
tilt term switched on, total mass is a discrete martingale.  Noise uses Ito
timing: each increment multiplies the pre-step state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .covariance import CovarianceSpec, ScaleParams
from .errors import BlowUpError, CflError, ResolutionError, ValidationError, WindowError
from .noise import FieldIncrement, FieldSource, NoiseGrid, mollifier_kernel

FLUX_FORMS = ("conservative-central", "upwind")


@dataclass
class GridField:
    """A real-valued function on a uniform grid at a fixed time."""

    values: np.ndarray
    t: float
    x: np.ndarray
    dx: float

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def l2(self) -> float:
        return float((self.values ** 2).sum() * self.dx)

    def at(self, y) -> np.ndarray:
        return np.interp(y, self.x, self.values, left=0.0, right=0.0)

    def copy(self) -> "GridField":
        return GridField(self.values.copy(), self.t, self.x, self.dx)


@dataclass(frozen=True)
class SpdeScheme:
    """Explicit Euler-Maruyama scheme options.

    stability_factor bounds the diffusive step: dt <= factor * dx^2 / nu.
    The multiplicative gradient noise is the stiffest term, so configs are
    additionally validated against dt <= dx / (10 lam mu sqrt(C(0)/eps)).
    """

    flux_form: str = "conservative-central"
    stability_factor: float = 0.25

    def __post_init__(self):
        if self.flux_form not in FLUX_FORMS:
            raise ValidationError(f"unknown flux form {self.flux_form!r}")
        if not 0.0 < self.stability_factor < 1.0:
            raise ValidationError("stability_factor must be in (0, 1)")

    def check(self, dt: float, dx: float, nu: float,
              cov: CovarianceSpec | None = None, p: ScaleParams | None = None,
              lam_term: float = 0.0) -> None:
        limit = self.stability_factor * dx * dx / nu
        if dt > limit * (1.0 + 1e-12):
            raise CflError(f"dt = {dt} exceeds CFL limit {limit} "
                           f"(factor {self.stability_factor}, nu {nu})")
        if cov is not None and p is not None and lam_term != 0.0 and p.mu > 0.0 and cov.C0 > 0.0:
            noise_limit = dx / (10.0 * abs(lam_term) * p.mu * math.sqrt(cov.C0 / p.eps))
            if dt > noise_limit * (1.0 + 1e-12):
                raise CflError(f"dt = {dt} exceeds multiplicative-noise limit "
                               f"{noise_limit}")


def heat_kernel(nu: float, t: float, y, period: float | None = None):
    """Gaussian density with variance nu*t, periodized when `period` is given.

    The wrapped sum is truncated once image terms drop below 1e-14 of the
    peak.
    """
    if t <= 0.0 or nu <= 0.0:
        raise ValidationError("heat kernel needs t > 0 and nu > 0")
    y = np.asarray(y, dtype=float)
    var = nu * t
    norm = 1.0 / math.sqrt(2.0 * math.pi * var)
    if period is None:
        return norm * np.exp(-y * y / (2.0 * var))
    # images out to where exp(-(k*period)^2 / 2 var) < 1e-14
    k_max = int(math.ceil((math.sqrt(2.0 * var * math.log(1e14)) + np.abs(y).max())
                          / period)) + 1
    out = np.zeros_like(y)
    for k in range(-k_max, k_max + 1):
        out += np.exp(-((y + k * period) ** 2) / (2.0 * var))
    return norm * out


def heat_field(grid: NoiseGrid, nu: float, t: float) -> GridField:
    """The periodized heat kernel evaluated on the grid cells."""
    x = grid.cells()
    return GridField(values=heat_kernel(nu, t, x, period=2.0 * grid.L),
                     t=t, x=x, dx=grid.dx)


def init_delta(grid: NoiseGrid, nu: float, t0: float | None = None) -> GridField:
    """Short-time heat kernel standing in for the delta initial condition."""
    if t0 is None:
        t0 = 4.0 * grid.dx ** 2 / nu
    if math.sqrt(nu * t0) < 2.0 * grid.dx * (1.0 - 1e-12):
        raise ResolutionError(
            f"t0 = {t0} puts the kernel width below 2 dx; the delta is not "
            "representable on this grid")
    return heat_field(grid, nu, t0)


def _transport_step(v: np.ndarray, dw: np.ndarray, nu: float, lam: float,
                    dt: float, dx: float, flux_form: str) -> np.ndarray:
    lap = (np.roll(v, -1, axis=-1) - 2.0 * v + np.roll(v, 1, axis=-1)) / (dx * dx)
    g = v * dw
    if flux_form == "conservative-central":
        adv = (np.roll(g, -1, axis=-1) - np.roll(g, 1, axis=-1)) / (2.0 * dx)
    else:
        wf = 0.5 * (dw + np.roll(dw, -1, axis=-1))
        up = np.where(wf > 0.0, v, np.roll(v, -1, axis=-1))
        fl = wf * up
        adv = (fl - np.roll(fl, 1, axis=-1)) / dx
    out = v + (0.5 * nu * dt) * lap - adv
    if lam != 0.0:
        out += lam * g
    return out


def step_transport(state: GridField, dW: FieldIncrement, p: ScaleParams,
                   lambda_term: float, scheme: SpdeScheme, dt: float) -> GridField:
    """One explicit Euler-Maruyama step of the (tilted) transport equation.

    With lambda_term = 0 this advances the kernel density; with
    lambda_term = lam it advances the tilted density.  dW multiplies the
    pre-step values (Ito timing).
    """
    scheme.check(dt, state.dx, p.nu)
    new = _transport_step(state.values, dW.values, p.nu, lambda_term, dt,
                          state.dx, scheme.flux_form)
    if not np.all(np.isfinite(new)):
        raise BlowUpError("transport step produced non-finite values",
                          time_index=dW.time_index)
    return GridField(values=new, t=state.t + dt, x=state.x, dx=state.dx)


def step_she(state: GridField, xi: np.ndarray, kappa: float, nu: float,
             scheme: SpdeScheme, dt: float) -> GridField:
    """One explicit step of the multiplicative stochastic heat equation.

    The discrete white noise per cell is xi_j / dx (variance dt/dx), the
    standard lattice discretization of space-time white noise.
    """
    scheme.check(dt, state.dx, nu)
    v = state.values
    lap = (np.roll(v, -1, axis=-1) - 2.0 * v + np.roll(v, 1, axis=-1)) / (state.dx ** 2)
    new = v + (0.5 * nu * dt) * lap + (kappa / state.dx) * v * xi
    if not np.all(np.isfinite(new)):
        raise BlowUpError("SHE step produced non-finite values")
    return GridField(values=new, t=state.t + dt, x=state.x, dx=state.dx)


def _support_radius(field: GridField, tail: float = 1e-8) -> float:
    """Smallest r such that the |values| mass outside [-r, r] is below `tail`."""
    absmass = np.abs(field.values) * field.dx
    total = absmass.sum()
    if total == 0.0:
        return 0.0
    order = np.argsort(np.abs(field.x))
    inside = np.cumsum(absmass[order])
    k = int(np.searchsorted(inside, total * (1.0 - tail)))
    k = min(k, len(order) - 1)
    return float(abs(field.x[order[k]]))


def tilt_kernel(u: GridField, lam: float, nu: float) -> GridField:
    """Exponentially reweight and recentre a kernel density.

    Returns y -> exp(nu lam^2 t / 2 + lam y) * u(y + lam nu t) on u's grid.
    The shifted window must stay inside the region where u is resolved to
    1e-8 mass, otherwise a WindowError is raised.
    """
    shift = lam * nu * u.t
    radius = _support_radius(u)
    half_width = float(u.x[-1] + u.dx)
    if radius + abs(shift) > half_width * (1.0 + 1e-12):
        raise WindowError(
            f"shifted window (radius {radius} + shift {abs(shift)}) exits the "
            f"resolved domain of half-width {half_width}")
    if shift == 0.0:
        shifted = u.values
    else:
        # cubic interpolation: the exponential reweighting amplifies any
        # systematic interpolation bias in the mass identity
        from scipy.interpolate import CubicSpline
        spline = CubicSpline(u.x, u.values, bc_type="natural")
        xq = u.x + shift
        shifted = np.where((xq >= u.x[0]) & (xq <= u.x[-1]), spline(xq), 0.0)
    pref = np.exp(0.5 * nu * lam * lam * u.t + lam * u.x)
    return GridField(values=pref * shifted, t=u.t, x=u.x, dx=u.dx)


def inner_products(f: GridField, g: GridField, cov: CovarianceSpec | None = None,
                   p: ScaleParams | None = None) -> dict:
    """Plain and mollified L2 pairings of two fields on the same grid.

    The mollified pairing convolves both fields with rho_eps (circular, with
    the dx quadrature weight) before integrating.
    """
    if f.values.shape != g.values.shape or f.dx != g.dx:
        raise ValidationError("fields live on different grids")
    out = {"l2": float((f.values * g.values).sum() * f.dx)}
    if cov is not None and p is not None:
        dx = f.dx
        if p.eps < 4.0 * dx:
            raise ResolutionError("mollifier under-resolved on the field grid")
        k = int(math.floor(p.eps / dx))
        offsets = np.arange(-k, k + 1) * dx
        taps = (p.mu / math.sqrt(p.eps)) * cov.rho_at(offsets / p.eps) * dx
        fm = convolve1d(f.values, taps, mode="wrap")
        gm = convolve1d(g.values, taps, mode="wrap")
        out["l2_mollified"] = float((fm * gm).sum() * dx)
    return out


def negative_mass_fraction(field: GridField) -> float:
    """Diagnostic: |negative part| mass relative to total |mass|."""
    neg = -field.values[field.values < 0.0].sum()
    tot = np.abs(field.values).sum()
    return float(neg / tot) if tot > 0.0 else 0.0


@dataclass
class EnsembleStats:
    """Replica statistics of an SPDE ensemble at the requested output times."""

    times: np.ndarray        # (T,)
    mean: np.ndarray         # (T, nx) replica mean field
    var: np.ndarray          # (T, nx) replica variance (ddof=1)
    mass: np.ndarray         # (T, R)  total mass per replica
    l2: np.ndarray           # (T, R)  integral of V^2 per replica
    x: np.ndarray
    dx: float
    replicas: int
    quantiles: np.ndarray | None = None   # (T, Q, nx)
    quantile_levels: tuple = ()

    def mean_field(self, i: int) -> GridField:
        return GridField(self.mean[i], float(self.times[i]), self.x, self.dx)

    def se_mean(self, i: int) -> np.ndarray:
        return np.sqrt(self.var[i] / self.replicas)


def _output_steps(t_out, dt: float) -> list[int]:
    steps = []
    for t in t_out:
        n = round(t / dt)
        if abs(n * dt - t) > 1e-9 * max(1.0, t):
            raise ValidationError(f"output time {t} is not a multiple of dt = {dt}")
        steps.append(int(n))
    if steps != sorted(steps) or len(set(steps)) != len(steps):
        raise ValidationError("output times must be strictly increasing")
    return steps


def run_transport_ensemble(grid: NoiseGrid, cov: CovarianceSpec, p: ScaleParams,
                           t_out, replicas: int, lam_term: float = 0.0,
                           scheme: SpdeScheme | None = None,
                           t0: float | None = None,
                           quantile_levels: tuple = (),
                           check_every: int = 100) -> EnsembleStats:
    """Advance `replicas` independent realizations of the (tilted) transport
    equation from a near-delta start and collect replica statistics.

    Replica r regenerates its own noise from (grid.seed, step, r); the run is
    a pure function of (grid, cov, p, scheme) and is scheduling-independent.
    Reductions use numpy pairwise summation.
    """
    scheme = scheme or SpdeScheme()
    dt, dx = grid.dt, grid.dx
    scheme.check(dt, dx, p.nu, cov=cov, p=p, lam_term=lam_term)
    if t0 is None:
        m0 = max(1, math.ceil(4.0 * dx * dx / (p.nu * dt)))
    else:
        m0 = max(1, math.ceil(t0 / dt - 1e-12))
    t0 = m0 * dt
    init = init_delta(grid, p.nu, t0)
    out_steps = _output_steps(t_out, dt)
    if out_steps[0] < m0:
        raise ValidationError(f"first output time is before the resolved start t0 = {t0}")

    source = FieldSource(grid, cov, p, rows=replicas)
    v = np.broadcast_to(init.values, (replicas, grid.nx)).copy()
    return _drive(grid, v, source, out_steps, m0, dt, dx,
                  lambda state, dw: _transport_step(state, dw, p.nu, lam_term,
                                                    dt, dx, scheme.flux_form),
                  mollified=True, quantile_levels=quantile_levels,
                  check_every=check_every, replicas=replicas)


def run_she_ensemble(grid: NoiseGrid, kappa: float, nu: float, t_out,
                     replicas: int, scheme: SpdeScheme | None = None,
                     t0: float | None = None,
                     check_every: int = 100) -> EnsembleStats:
    """Same driver for the stochastic heat equation with space-time white noise."""
    scheme = scheme or SpdeScheme()
    dt, dx = grid.dt, grid.dx
    scheme.check(dt, dx, nu)
    m0 = max(1, math.ceil(4.0 * dx * dx / (nu * dt))) if t0 is None \
        else max(1, math.ceil(t0 / dt - 1e-12))
    init = init_delta(grid, nu, m0 * dt)
    out_steps = _output_steps(t_out, dt)
    if out_steps[0] < m0:
        raise ValidationError("first output time is before the resolved start")

    source = FieldSource(grid, rows=replicas)
    v = np.broadcast_to(init.values, (replicas, grid.nx)).copy()
    inv_dx = 1.0 / dx

    def stepper(state, xi):
        lap = (np.roll(state, -1, axis=-1) - 2.0 * state
               + np.roll(state, 1, axis=-1)) / (dx * dx)
        return state + (0.5 * nu * dt) * lap + (kappa * inv_dx) * state * xi

    return _drive(grid, v, source, out_steps, m0, dt, dx, stepper,
                  mollified=False, quantile_levels=(), check_every=check_every,
                  replicas=replicas)


def _drive(grid, v, source, out_steps, m0, dt, dx, stepper, mollified,
           quantile_levels, check_every, replicas):
    n_out = len(out_steps)
    nx = grid.nx
    times = np.empty(n_out)
    mean = np.empty((n_out, nx))
    var = np.empty((n_out, nx))
    mass = np.empty((n_out, replicas))
    l2 = np.empty((n_out, replicas))
    quants = np.empty((n_out, len(quantile_levels), nx)) if quantile_levels else None

    out_idx = 0
    step = m0
    while out_idx < n_out:
        target = out_steps[out_idx]
        while step < target:
            dw = source.increments(step) if mollified else source.white(step)
            v = stepper(v, dw)
            step += 1
            if step % check_every == 0 and not np.all(np.isfinite(v[:, :: max(1, nx // 64)])):
                raise BlowUpError("ensemble blow-up", time_index=step)
        if not np.all(np.isfinite(v)):
            raise BlowUpError("ensemble blow-up", time_index=step)
        times[out_idx] = target * dt
        mean[out_idx] = v.mean(axis=0, dtype=np.float64)
        var[out_idx] = v.var(axis=0, ddof=1, dtype=np.float64) if replicas > 1 else 0.0
        mass[out_idx] = v.sum(axis=1, dtype=np.float64) * dx
        l2[out_idx] = (v * v).sum(axis=1) * dx
        if quants is not None:
            quants[out_idx] = np.quantile(v, quantile_levels, axis=0)
        out_idx += 1

    return EnsembleStats(times=times, mean=mean, var=var, mass=mass, l2=l2,
                         x=grid.cells(), dx=dx, replicas=replicas,
                         quantiles=quants, quantile_levels=tuple(quantile_levels))
