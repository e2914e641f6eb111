import math

import numpy as np
import pytest

from flowlab import (FieldSource, MollifierSpec, NoiseGrid, build_covariance,
                     brownian_local_time, empirical_kernel, fk_moment,
                     heat_kernel, local_time, new_difference, new_flow_ensemble,
                     new_two_point, run_flow, scale_params, she_limit_oracle,
                     she_mass_second_moment, step_difference, step_flow,
                     step_two_point)
from flowlab.errors import BandwidthError, ValidationError
from flowlab.particles import default_two_point_dt


@pytest.fixture(scope="module")
def cov():
    return build_covariance(MollifierSpec("triangle-smooth", 1.0, 513))


def test_step_flow_pure_brownian(cov):
    # zero field: ensemble variance grows like sigma^2 t
    grid = NoiseGrid(L=6.0, nx=256, dt=1e-3, seed=4)
    p = scale_params(cov, 0.5, 0.0, 1.0, 0.0)
    e = new_flow_ensemble(grid, p, 50_000, particle_seed_base=7)
    zero = np.zeros(grid.nx)
    for _ in range(200):
        e = step_flow(e, zero, grid.dt)
    t = 200 * grid.dt
    var = e.positions.var()
    se = var * math.sqrt(2.0 / e.positions.size)
    assert abs(var - t) < 3.0 * se


def test_step_flow_unconditional_variance_is_nu(cov):
    # one fresh field per replica: unconditional variance/t -> nu within 2%
    p = scale_params(cov, 0.5, 1.0, 1.0, 0.0)
    t, replicas = 0.2, 30_000
    grid = NoiseGrid(L=6.0, nx=1024, dt=2e-3, seed=900)
    src = FieldSource(grid, cov, p, rows=replicas)
    rng = np.random.default_rng(901)
    pos = np.zeros(replicas)
    rows = np.arange(replicas)
    steps = round(t / grid.dt)
    for k in range(steps):
        dw = src.increments(k)
        u = (pos + grid.L) / grid.dx
        i0 = np.floor(u).astype(np.int64)
        w = u - i0
        i0 %= grid.nx
        kick = dw[rows, i0] * (1.0 - w) + dw[rows, (i0 + 1) % grid.nx] * w
        pos += kick + p.sigma * math.sqrt(grid.dt) * rng.standard_normal(replicas)
    assert pos.var() / t == pytest.approx(p.nu, rel=0.02)


def test_two_particles_far_apart_uncorrelated(cov):
    # held far apart (> 2 eps), field kicks decorrelate
    grid = NoiseGrid(L=6.0, nx=512, dt=1e-3, seed=9)
    p = scale_params(cov, 0.25, 1.0, 0.0, 0.0)
    src = FieldSource(grid, cov, p)
    k1, k2 = [], []
    x1, x2 = -2.0, 2.0
    for k in range(4000):
        dw = src.increments(k)[0]
        i1 = int((x1 + grid.L) / grid.dx)
        i2 = int((x2 + grid.L) / grid.dx)
        k1.append(dw[i1])
        k2.append(dw[i2])
    k1, k2 = np.array(k1), np.array(k2)
    corr = np.corrcoef(k1, k2)[0, 1]
    assert abs(corr) < 3.0 / math.sqrt(k1.size)


def test_empirical_kernel_mass_exact(cov):
    grid = NoiseGrid(L=6.0, nx=256, dt=1e-3, seed=14)
    p = scale_params(cov, 0.5, 1.0, 1.0, 0.0)
    e = run_flow(grid, cov, p, 20_000, 0.05, particle_seed_base=3)
    k = empirical_kernel(e, 64)
    assert k.mass() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValidationError):
        ee = new_flow_ensemble(grid, p, 5)
        ee.flagged[:] = True
        empirical_kernel(ee, 16)


def test_field_averaged_kernel_matches_heat(cov):
    # averaging the quenched kernel over fields recovers the heat kernel
    p = scale_params(cov, 0.5, 1.0, 1.0, 0.0)
    t, n_fields, m = 0.2, 150, 2000
    bins = np.linspace(-4.0, 4.0, 41)
    counts = np.zeros((n_fields, 40))
    for g in range(n_fields):
        grid = NoiseGrid(L=6.0, nx=512, dt=2e-3, seed=3000 + g)
        e = run_flow(grid, cov, p, m, t, particle_seed_base=g + 11)
        k = empirical_kernel(e, bins)
        counts[g] = k.values
    mean = counts.mean(axis=0)
    se = counts.std(axis=0, ddof=1) / math.sqrt(n_fields)
    centers = 0.5 * (bins[:-1] + bins[1:])
    # bin-averaged heat kernel for an unbiased comparison
    from scipy.stats import norm
    edges_cdf = norm.cdf(bins / math.sqrt(p.nu * t))
    target = np.diff(edges_cdf) / np.diff(bins)
    assert np.all(np.abs(mean - target) < 3.5 * se + 1e-4)


def test_flow_vs_transport_same_field(cov):
    # the histogram kernel and the grid solver see the same realization;
    # their distance shrinks under joint refinement
    from flowlab import SpdeScheme, run_transport_ensemble
    p = scale_params(cov, 0.5, 1.0, 1.0, 0.0)
    t = 0.2
    dists = []
    for nx, m in ((128, 4000), (256, 16000), (512, 64000)):
        L = 6.0
        dx = 2 * L / nx
        dt = t / math.ceil(t / (0.25 * dx * dx / p.nu))
        grid = NoiseGrid(L=L, nx=nx, dt=dt, seed=77)
        stats = run_transport_ensemble(grid, cov, p, t_out=[t], replicas=1)
        e = run_flow(grid, cov, p, m, t, particle_seed_base=5)
        bins = np.linspace(-4.0, 4.0, 33)
        k = empirical_kernel(e, bins)
        centers = k.x
        solver = np.interp(centers, stats.x, stats.mean[0])
        dists.append(np.abs(k.values - solver).mean())
    assert dists[2] < dists[0]
    assert dists[2] < 0.8 * dists[1] + 0.005


def test_two_point_far_apart_independent(cov):
    p = scale_params(cov, 0.1, 1.0, 1.0, 1.5)
    path = new_two_point(cov, p, 4000, y0=(-1.0, 1.0))
    rng = np.random.default_rng(0)
    dt = default_two_point_dt(p)
    y1_0, y2_0 = path.y1.copy(), path.y2.copy()
    for _ in range(50):
        path = step_two_point(path, p, cov, dt, rng)
    assert np.all(path.A == 0.0)          # C^eps = 0 along the way
    d1 = path.y1 - y1_0
    d2 = path.y2 - y2_0
    corr = np.corrcoef(d1, d2)[0, 1]
    assert abs(corr) < 4.0 / math.sqrt(d1.size)
    # marginal variance matches nu t
    tt = 50 * dt
    assert d1.var() == pytest.approx(p.nu * tt, rel=0.1)


def test_two_point_at_origin_fully_correlated(cov):
    p = scale_params(cov, 0.1, 1.0, 0.0, 1.0)   # sigma = 0: field only
    path = new_two_point(cov, p, 100, y0=(0.0, 0.0))
    rng = np.random.default_rng(1)
    path = step_two_point(path, p, cov, 1e-4, rng)
    # both coordinates receive the identical increment
    assert np.allclose(path.y1, path.y2, atol=1e-14)


def test_two_point_weight_monotone(cov):
    p = scale_params(cov, 0.2, 1.0, 1.0, 1.0)
    path = new_two_point(cov, p, 2000)
    rng = np.random.default_rng(2)
    dt = default_two_point_dt(p)
    last = path.A.copy()
    for _ in range(100):
        path = step_two_point(path, p, cov, dt, rng)
        assert np.all(path.A >= last - 1e-15)
        last = path.A.copy()
    assert np.all(path.A >= 0.0)


def test_difference_pure_brownian_when_no_covariance():
    cov0 = build_covariance(MollifierSpec("triangle-smooth", 0.0, 513))
    p = scale_params(cov0, 0.1, 1.0, 1.0, 0.0)
    st = new_difference(cov0, p, 40_000)
    rng = np.random.default_rng(3)
    for _ in range(100):
        st = step_difference(st, cov0, p, 1e-4, rng)
    # a = sigma^2 everywhere: variance 2 sigma^2 t
    assert st.d.var() == pytest.approx(2.0 * 0.01, rel=0.05)


def test_difference_matches_density_ks(cov):
    # empirical law of D_t against the solver distribution function
    from flowlab import solve_q
    p = scale_params(cov, 0.2, 1.0, 1.0, 0.0)
    t = 0.25
    n = 100_000
    st = new_difference(cov, p, n)
    rng = np.random.default_rng(8)
    dt = default_two_point_dt(p)
    steps = round(t / dt)
    for _ in range(steps):
        st = step_difference(st, cov, p, t / steps, rng)
    grid = NoiseGrid(L=6.0, nx=2048, dt=1.0, seed=0)
    q = solve_q(cov, p, t, grid)
    cdf = np.cumsum(q.values) * grid.dx
    emp_sorted = np.sort(st.d)
    model_cdf = np.interp(emp_sorted, q.field.x, cdf)
    ks = np.abs(model_cdf - np.arange(1, n + 1) / n).max()
    assert ks < 3.0 / math.sqrt(n)


def test_difference_variance_off_support(cov):
    # far from the origin the diffusivity is the full 2 nu
    p = scale_params(cov, 0.05, 1.0, 1.0, 0.0)
    st = new_difference(cov, p, 30_000, d0=3.0)
    rng = np.random.default_rng(5)
    st = step_difference(st, cov, p, 1e-4, rng)
    assert (st.d - 3.0).var() == pytest.approx(2.0 * p.nu * 1e-4, rel=0.05)


def test_local_time_basics():
    dt, rate = 1e-4, 2.0
    h = 8.0 * math.sqrt(rate * dt)
    path = np.linspace(5.0, 6.0, 101)     # never near level 0
    est = local_time(path, 0.0, h, dt, rate)
    assert est.value == 0.0
    with pytest.raises(BandwidthError):
        local_time(path, 0.0, 0.1 * math.sqrt(rate * dt), dt, rate)


def test_local_time_levy_identity():
    # E[L^0_t] = sqrt(2 (2 nu) t / pi) for the difference of nu-Brownian
    # motions, via the Tanaka identity E[L] = E|D_t|
    nu, t, dt = 1.0, 0.5, 1e-4
    vals, h = brownian_local_time(nu, t, dt, replicas=40_000, seed=10)
    target = math.sqrt(2.0 * (2.0 * nu) * t / math.pi)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - target) < max(3.0 * se, 0.02 * target)


def test_local_time_bandwidth_robustness():
    nu, t, dt = 1.0, 0.25, 2e-6
    a, _ = brownian_local_time(nu, t, dt, replicas=30_000, seed=11,
                               bandwidth_factor=8.0)
    b, _ = brownian_local_time(nu, t, dt, replicas=30_000, seed=12,
                               bandwidth_factor=4.0)
    se = math.hypot(a.std() / math.sqrt(a.size), b.std() / math.sqrt(b.size))
    assert abs(a.mean() - b.mean()) < 3.0 * se


def test_she_limit_oracle_kappa_zero():
    est = she_limit_oracle(0.0, 1.0, 0.4, f=lambda b1, b2: b1 * b1,
                           replicas=40_000, dt=2e-4, seed=13)
    # plain Gaussian second moment: nu t
    assert est.mean == pytest.approx(0.4, rel=0.05)
    assert not est.low_confidence


def test_she_limit_oracle_small_kappa_expansion():
    nu, t = 1.0, 0.4
    kappa = 0.3
    est = she_limit_oracle(kappa, nu, t, replicas=120_000, dt=5e-5, seed=14)
    lead = 1.0 + (kappa ** 2 / (2 * nu)) * math.sqrt(2 * (2 * nu) * t / math.pi)
    assert abs(est.mean - lead) < 4.0 * est.se + 0.01


def test_she_limit_oracle_vs_volterra_mass():
    nu, t, kappa = 1.0, 0.4, 0.8
    est = she_limit_oracle(kappa, nu, t, replicas=150_000, dt=2e-5, seed=15)
    target = she_mass_second_moment(kappa, nu, t)
    assert abs(est.mean - target) < 3.0 * est.se + 0.01 * target


def test_she_limit_oracle_guard():
    with pytest.raises(ValidationError):
        she_limit_oracle(10.0, 0.5, 4.0)


def test_fk_consistency_weight_vs_solver_mass(cov):
    # E[e^A] equals the solver's total mass within noise
    from flowlab import solve_q_lambda
    p = scale_params(cov, 0.2, 1.0, 1.0, 1.0)
    t = 0.25
    est = fk_moment(cov, p, t, replicas=150_000, seed=16)
    grid = NoiseGrid(L=6.0, nx=2048, dt=1.0, seed=0)
    mass = solve_q_lambda(cov, p, t, grid).mass
    assert abs(est.mean - mass) < 3.0 * est.se + 0.003 * mass
