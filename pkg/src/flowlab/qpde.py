"""Deterministic solvers for the separation density q, the weighted density
q_lam (the second-moment density of the tilted kernel), the Duhamel fixed
point that cross-checks it, and the 1-D Volterra oracle for the stochastic
heat equation's second moment.

Conventions: the separation density solves d/dt q = d^2/dy^2 (a(y) q) with
a(y) = sigma^2 + C^eps(0) - C^eps(y) (no 1/2: the generator of the separation
process is a d^2/dx^2), discretized in conservation form on the periodic
grid, so total mass telescopes exactly.  The weighted density adds the
potential lam^2 C^eps(y) via a Strang-split exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .covariance import CovarianceSpec, ScaleParams, a_eps, scaled_covariance
from .errors import (DivergenceError, InstabilityError, ResolutionError,
                     ValidationError)
from .noise import NoiseGrid
from .spde import GridField, heat_kernel

_NEG_MASS_TOL = 1e-6


@dataclass
class QSolution:
    """Separation density (weighted or not) at one time, on the full grid."""

    field: GridField
    lam: float
    t: float

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def q0(self) -> float:
        """Value at separation zero (exact grid cell)."""
        return float(self.field.values[len(self.field.values) // 2])

    @property
    def mass(self) -> float:
        return self.field.mass()


class _ConservativeCN:
    """Crank-Nicolson stepper for d/dt q = D2(a q) on the periodic grid.

    The operator has zero column sums, so both half-steps preserve the total
    exactly; the factorization is reused across steps and starting points.
    """

    def __init__(self, grid: NoiseGrid, a: np.ndarray, dt: float):
        nx = grid.nx
        s = 1.0 / grid.dx ** 2
        rows, cols, data = [], [], []
        for j in range(nx):
            jm, jp = (j - 1) % nx, (j + 1) % nx
            rows += [j, j, j]
            cols += [jm, j, jp]
            data += [-0.5 * dt * s * a[jm],
                     1.0 + dt * s * a[j],
                     -0.5 * dt * s * a[jp]]
        m = csc_matrix((data, (rows, cols)), shape=(nx, nx))
        self._lu = splu(m)
        self._a = a
        self._half = 0.5 * dt * s
        self.dt = dt

    def step(self, q: np.ndarray) -> np.ndarray:
        a = self._a if q.ndim == 1 else self._a[:, None]
        w = a * q
        rhs = q + self._half * (np.roll(w, -1, axis=0) + np.roll(w, 1, axis=0) - 2.0 * w)
        return self._lu.solve(rhs)


def _check_resolution(grid: NoiseGrid, p: ScaleParams):
    if p.sigma <= 0.0:
        raise ValidationError("the separation solver needs sigma > 0 "
                              "(a(0) = sigma^2 sets the start resolution)")
    if grid.dx > p.eps / 8.0 * (1.0 + 1e-12):
        raise ResolutionError(
            f"dx = {grid.dx} does not resolve eps = {p.eps} (need dx <= eps/8)")


def _choose_dt(grid: NoiseGrid, p: ScaleParams, t: float, vmax: float,
               dt: float | None) -> float:
    if dt is None:
        dt = min(t / 200.0, 0.25 * p.eps ** 2 / p.nu, 2e-3)
        if vmax > 0.0:
            dt = min(dt, 0.25 / vmax)
    dt_min = 2.0 * grid.dx ** 2 / p.sigma ** 2   # start Gaussian must span 2 dx
    n = max(1, round(t / max(dt, 1e-300)))
    if t / n < dt_min:
        n = max(1, int(t / dt_min))
    return t / n


def _solve_weighted(cov: CovarianceSpec, p: ScaleParams, t: float,
                    grid: NoiseGrid, lam: float, dt: float | None,
                    snapshot_times=None):
    _check_resolution(grid, p)
    if t <= 0.0:
        raise ValidationError("t must be positive")
    x = grid.cells()
    a = np.asarray(a_eps(cov, p, x))
    pot = lam ** 2 * np.asarray(scaled_covariance(cov, p, x))
    dt = _choose_dt(grid, p, t, pot.max(initial=0.0), dt)
    n = round(t / dt)
    stepper = _ConservativeCN(grid, a, dt)
    ehalf = np.exp(0.5 * dt * pot)

    # state at time dt: locally Gaussian with variance 2 a(0) dt, carrying
    # the exponential weight accumulated over the start interval
    q = heat_kernel(2.0 * a[grid.nx // 2], dt, x, period=2.0 * grid.L)
    q = q * np.exp(dt * pot)
    snaps_at = {}
    if snapshot_times:
        for ts in snapshot_times:
            k = min(max(1, round(ts / dt)), n)
            snaps_at.setdefault(k, ts)
    snapshots = []

    def _record(k, qk):
        fld = GridField(qk.copy(), k * dt, x, grid.dx)
        snapshots.append(QSolution(field=fld, lam=lam, t=k * dt))

    if 1 in snaps_at:
        _record(1, q)
    for k in range(2, n + 1):
        q = ehalf * stepper.step(ehalf * q)
        if k in snaps_at:
            _record(k, q)
    neg = -(q[q < 0.0].sum()) * grid.dx
    if neg > _NEG_MASS_TOL * max(q.sum() * grid.dx, 1e-300):
        raise InstabilityError(f"negative mass {neg} beyond tolerance")
    final = QSolution(field=GridField(q, n * dt, x, grid.dx), lam=lam, t=n * dt)
    return final, snapshots


def solve_q(cov: CovarianceSpec, p: ScaleParams, t: float, grid: NoiseGrid,
            dt: float | None = None, snapshot_times=None):
    """Transition density of the separation process started from zero.

    Shares the weighted solver's code path with the potential forced to zero.
    """
    final, snaps = _solve_weighted(cov, p, t, grid, lam=0.0, dt=dt,
                                   snapshot_times=snapshot_times)
    return (final, snaps) if snapshot_times else final


def solve_q_lambda(cov: CovarianceSpec, p: ScaleParams, t: float,
                   grid: NoiseGrid, dt: float | None = None,
                   snapshot_times=None):
    """Weighted separation density q_lam (potential lam^2 C^eps, Strang split)."""
    final, snaps = _solve_weighted(cov, p, t, grid, lam=p.lam, dt=dt,
                                   snapshot_times=snapshot_times)
    return (final, snaps) if snapshot_times else final


def duhamel_iterate(cov: CovarianceSpec, p: ScaleParams, t: float,
                    grid: NoiseGrid, max_iter: int = 60, tol: float = 1e-9,
                    panels: int = 96, substeps: int = 8,
                    endpoint_depth: int = 4,
                    support_stride: int | None = None) -> QSolution:
    """Picard fixed point of the variation-of-constants equation for q_lam.

    q_lam(t, y) = q(t; 0, y)
                + lam^2 int_0^t int q(t-s; x, y) C^eps(x) q_lam(s, x) dx ds.

    Translation invariance does not hold (a depends on y), so q(.; x, .) is
    solved once per starting point on the C^eps support and cached at the
    panel times.  Near s = t the inner integral develops a sqrt(t-s)
    boundary layer where the propagator's mass crosses the support edge, so
    the last `endpoint_depth` panels are integrated at substep resolution
    (with the running iterate interpolated linearly in time); the s = 0 and
    s = t endpoints use the exact delta limits.  This is the independent
    cross-check of the direct solver.
    """
    _check_resolution(grid, p)
    x = grid.cells()
    nx = grid.nx
    a = np.asarray(a_eps(cov, p, x))
    ceps = np.asarray(scaled_covariance(cov, p, x))
    lam2 = p.lam ** 2

    ds = t / panels
    sub = max(1, substeps)
    dt = ds / sub
    dt_min = 2.0 * grid.dx ** 2 / p.sigma ** 2
    while dt < dt_min and sub > 1:
        sub -= 1
        dt = ds / sub
    k0 = max(1, min(endpoint_depth, panels - 1))

    # starting points inside the potential support; the x-integrand is smooth
    # at scale eps, so a stride of ~eps/12 cells loses nothing measurable
    if support_stride is None:
        support_stride = max(1, int(p.eps / (12.0 * grid.dx)))
    half_sup = int(math.ceil(2.0 * p.eps / grid.dx))
    offsets = np.arange(-(half_sup // support_stride) * support_stride,
                        half_sup + 1, support_stride)
    support = (nx // 2 + offsets)
    support = support[(support >= 0) & (support < nx)]
    support = support[np.abs(ceps[support]) + (support == nx // 2) > 0.0]
    i0_rel = int(np.searchsorted(support, nx // 2))
    if support[i0_rel] != nx // 2:
        raise ValidationError("separation grid must contain y = 0")
    x_weight = support_stride * grid.dx

    # family q(tau; x_s, .) cached at panel times tau_j = j ds (qfam) and at
    # substep times tau = i dt up to k0 ds (qfine) for the endpoint layer
    stepper = _ConservativeCN(grid, a, dt)
    states = np.empty((x.size, support.size))
    for s_idx, cell in enumerate(support):
        states[:, s_idx] = heat_kernel(2.0 * a[cell], dt, x - x[cell],
                                       period=2.0 * grid.L)
    n_fine = k0 * sub
    qfam = np.zeros((panels + 1, support.size, nx))
    qfine = np.zeros((n_fine + 1, support.size, nx))
    qfine[1] = states.T
    step_count = 1
    for j in range(1, panels + 1):
        target = j * sub
        while step_count < target:
            states = stepper.step(states)
            step_count += 1
            if step_count <= n_fine:
                qfine[step_count] = states.T
        qfam[j] = states.T

    qbase = qfam[:, i0_rel, :]                      # q(s_m; 0, .)
    qlam = qbase.copy()                             # Picard start: lam = 0
    c_sup = ceps[support] * x_weight                # x-quadrature weights
    c00 = float(scaled_covariance(cov, p, 0.0))

    # For targets m > k0 the s-quadrature is a pure lag convolution
    # sum_j B[j] . G[m - j] with B[j] the weighted iterate on the support and
    # G the lag kernel: coarse trapezoid panels at lags > k0 (half weight at
    # the junction) plus the collapsed substep trapezoid of the endpoint
    # layer at lags 0..k0 (iterate interpolated linearly between panels).
    lagk = np.zeros_like(qfam)
    lagk[k0] = 0.5 * ds * qfam[k0]
    lagk[k0 + 1:] = ds * qfam[k0 + 1:]
    for i in range(1, n_fine + 1):
        w = dt if i < n_fine else 0.5 * dt
        q_whole, r = divmod(i, sub)
        if r == 0:
            lagk[q_whole] += w * qfine[i]
        else:
            th = r / sub
            lagk[q_whole + 1] += (th * w) * qfine[i]
            lagk[q_whole] += ((1.0 - th) * w) * qfine[i]
    n_fft = 2 * panels + 1
    ghat = np.fft.rfft(lagk, n=n_fft, axis=0)       # (bins, S, nx)

    def sweep(prev):
        bsup = prev[:, support] * c_sup
        bsup[0] = 0.0
        bhat = np.fft.rfft(bsup, n=n_fft, axis=0)
        bulk = np.fft.irfft(np.einsum("fs,fsy->fy", bhat, ghat), n=n_fft,
                            axis=0)[1:panels + 1]
        new = qbase.copy()
        new[1:] += lam2 * (bulk
                           + 0.5 * ds * c00 * qbase[1:]
                           + 0.5 * dt * ceps * prev[1:])
        # short targets m <= k0: single coarse panel [0, ds] plus substep
        # trapezoid on tau in [0, (m-1) ds]; redo them directly
        for m in range(1, min(k0, panels) + 1):
            k = m - 1
            term = 0.5 * ds * c00 * qbase[m]
            if k == 0:
                term += 0.5 * ds * ceps * prev[1]
            else:
                term += 0.5 * ds * (bsup[m - k] @ qfine[k * sub])
                term += 0.5 * dt * ceps * prev[m]
                for i in range(1, k * sub + 1):
                    w = dt if i < k * sub else 0.5 * dt
                    q_whole, r = divmod(i, sub)
                    if r == 0:
                        bvec = bsup[m - q_whole]
                    else:
                        th = r / sub
                        bvec = th * bsup[m - q_whole - 1] \
                            + (1.0 - th) * bsup[m - q_whole]
                    term += w * (bvec @ qfine[i])
            new[m] = qbase[m] + lam2 * term
        return new

    residual = None
    for _ in range(max_iter):
        new = sweep(qlam)
        residual = float(np.max(np.abs(new - qlam)))
        qlam = new
        if residual < tol:
            break
    else:
        raise DivergenceError(
            f"Picard iteration did not reach tol = {tol} in {max_iter} "
            f"iterations", residual=residual)

    fld = GridField(qlam[panels], t, x, grid.dx)
    return QSolution(field=fld, lam=p.lam, t=t)


def duhamel_richardson(cov: CovarianceSpec, p: ScaleParams, t: float,
                       grid: NoiseGrid, panels: int = 128, substeps: int = 16,
                       **kwargs) -> QSolution:
    """Panel-refined fixed point: runs at panels/2 and panels with the same
    substep length (so both carry the identical start state) and extrapolates
    at order 3/2, the panel-quadrature order set by the endpoint layers."""
    # keep the shared substep admissible for the start resolution
    dt_min = 2.0 * grid.dx ** 2 / p.sigma ** 2
    sub = max(1, min(substeps, int(t / (panels * dt_min))))
    coarse = duhamel_iterate(cov, p, t, grid, panels=panels // 2,
                             substeps=2 * sub, **kwargs)
    fine = duhamel_iterate(cov, p, t, grid, panels=panels,
                           substeps=sub, **kwargs)
    r = 2.0 ** 1.5
    values = (r * fine.values - coarse.values) / (r - 1.0)
    return QSolution(field=GridField(values, t, fine.field.x, fine.field.dx),
                     lam=p.lam, t=t)


def _excess_second_moment(kappa: float, nu: float, t: float, n: int) -> np.ndarray:
    """March R(t) = kappa^2/(4 nu) + kappa^2 int_0^t g(t-s) R(s) ds on n panels.

    g(tau) = (4 pi nu tau)^{-1/2}; the weakly singular kernel is handled by
    product integration (exact panel moments of (t-s)^{-1/2} against a
    piecewise-linear R).
    """
    k2 = kappa ** 2
    base = k2 / (4.0 * nu)
    pref = k2 / math.sqrt(4.0 * math.pi * nu)
    ds = t / n
    s = ds * np.arange(n + 1)
    r = np.empty(n + 1)
    r[0] = base
    # weights of the final panel (s_{i-1}, s_i) for the implicit node R_i
    i0_last = 2.0 * math.sqrt(ds)
    i1_last = (4.0 / 3.0) * ds ** 1.5
    w_right_last = i1_last / ds
    w_left_last = i0_last - w_right_last
    denom = 1.0 - pref * w_right_last
    for i in range(1, n + 1):
        ti = s[i]
        acc = 0.0
        if i >= 2:
            u0 = ti - s[: i - 1]
            u1 = ti - s[1:i]
            r0, r1 = np.sqrt(u0), np.sqrt(u1)
            i0 = 2.0 * (r0 - r1)
            i1 = 2.0 * u0 * (r0 - r1) - (2.0 / 3.0) * (u0 * r0 - u1 * r1)
            wr = i1 / ds
            wl = i0 - wr
            acc = float(np.dot(wl, r[: i - 1]) + np.dot(wr, r[1:i]))
        acc += w_left_last * r[i - 1]
        r[i] = (base + pref * acc) / denom
    return r


def she_second_moment(kappa: float, nu: float, t: float,
                      resolution: int = 2000, with_error: bool = False):
    """Spatial L2 second moment of the stochastic heat equation at time t.

    Solves r(t) = p_t(0) + kappa^2 int_0^t p_{t-s}(0) r(s) ds with
    p_t(0) = (4 pi nu t)^{-1/2}, the delta-potential reduction of the
    second-moment equation, after splitting off the singular free part.
    """
    if t <= 0.0:
        raise ValidationError("t must be positive")
    if resolution < 8:
        raise ResolutionError("resolution too coarse for the Volterra solve")
    g_t = 1.0 / math.sqrt(4.0 * math.pi * nu * t)
    if kappa == 0.0:
        return (g_t, 0.0) if with_error else g_t
    r = g_t + _excess_second_moment(kappa, nu, t, resolution)[-1]
    if with_error:
        r_half = g_t + _excess_second_moment(kappa, nu, t, resolution // 2)[-1]
        return r, abs(r - r_half)
    return r


def she_mass_second_moment(kappa: float, nu: float, t: float,
                           resolution: int = 2000) -> float:
    """Second moment of the total mass of the stochastic heat equation.

    E[(int Z dy)^2] = 1 + kappa^2 int_0^t r(s) ds, from the quadratic
    variation of the mass martingale.
    """
    if kappa == 0.0:
        return 1.0
    excess = _excess_second_moment(kappa, nu, t, resolution)
    int_g = math.sqrt(t / (math.pi * nu))
    int_r = int_g + float(np.trapz(excess, dx=t / resolution))
    return 1.0 + kappa ** 2 * int_r


def smoothing_error(qlam: QSolution, cov: CovarianceSpec, eps: float) -> float:
    """Mean-square distance between the tilted kernel and its own mollification.

    Evaluates, with profile and covariance normalized to unit mass,
    2 int (q(0) - q(eps y)) rho(y) dy + int (q(eps y) - q(0)) (rho*rho)(y) dy,
    which equals the second moment of V - (normalized mollification of V).
    """
    mass = cov.rho.mass
    if mass == 0.0:
        return 0.0
    q0 = qlam.q0
    q_rho = qlam.field.at(eps * cov.rho_y)
    q_cc = qlam.field.at(eps * cov.y)
    term1 = 2.0 * simpson((q0 - q_rho) * cov.rho_values / mass, dx=cov.rho_y[1] - cov.rho_y[0])
    term2 = simpson((q_cc - q0) * cov.C / mass ** 2, dx=cov.h)
    return float(term1 + term2)


@dataclass(frozen=True)
class AronsonFit:
    """Fitted Gaussian envelope q <= C t^{-1/2} exp(-c y^2 / 2t)."""

    c: float
    C: float
    violations: int
    points: int


def aronson_check(solutions, percentile: float = 100.0,
                  rel_slack: float = 1e-3, floor: float = 1e-12) -> AronsonFit:
    """Fit a Gaussian upper envelope to separation-density snapshots.

    The fit linearizes log(q sqrt(t)) against u = y^2/(2t) (the envelope is a
    line with slope -c), picks c minimizing the mean headroom of the
    dominating line, and sets C from the requested percentile of the
    intercepts.  Violations are exceedances beyond rel_slack.
    """
    us, zs = [], []
    peak = max(float(np.max(s.values)) for s in solutions)
    for s in solutions:
        q = s.values
        keep = q > floor * peak
        u = s.field.x[keep] ** 2 / (2.0 * s.t)
        z = np.log(q[keep] * math.sqrt(s.t))
        us.append(u)
        zs.append(z)
    u = np.concatenate(us)
    z = np.concatenate(zs)
    u_mean = float(u.mean())

    def headroom(c):
        # mean gap between the dominating line and the cloud
        return float(np.max(z + c * u)) - c * u_mean

    # coarse-to-fine scan for the slope minimizing mean envelope headroom,
    # anchored at the least-squares slope scale
    ls_slope = -float(np.polyfit(u, z, 1)[0])
    lo, hi = 0.0, max(1e-6, 4.0 * abs(ls_slope))
    for _ in range(3):
        grid = np.linspace(lo, hi, 41)
        vals = [headroom(c) for c in grid]
        k = int(np.argmin(vals))
        lo, hi = grid[max(0, k - 1)], grid[min(len(grid) - 1, k + 1)]
    c = 0.5 * (lo + hi)
    intercepts = z + c * u
    log_C = float(np.percentile(intercepts, percentile))
    violations = int(np.sum(intercepts > log_C + math.log1p(rel_slack)))
    return AronsonFit(c=c, C=math.exp(log_C), violations=violations,
                      points=int(u.size))


def expected_occupation_weight(cov: CovarianceSpec, p: ScaleParams, t: float,
                               grid: NoiseGrid, dt: float | None = None,
                               n_times: int = 64) -> float:
    """Deterministic value of E[lam^2 int_0^t C^eps(D_s) ds] via the density.

    Integrates lam^2 int C^eps(y) q(s; 0, y) dy over s by the trapezoid rule
    on solver snapshots.
    """
    times = [t * (k + 1) / n_times for k in range(n_times)]
    _, snaps = solve_q(cov, p, t, grid, dt=dt, snapshot_times=times)
    x = grid.cells()
    ceps = np.asarray(scaled_covariance(cov, p, x))
    vals = [float((ceps * s.values).sum() * grid.dx) for s in snaps]
    ts = [s.t for s in snaps]
    # occupation integrand starts at C^eps(0) when the density is the delta
    ts = [0.0] + ts
    vals = [float(scaled_covariance(cov, p, 0.0))] + vals
    return p.lam ** 2 * float(np.trapz(vals, ts))
