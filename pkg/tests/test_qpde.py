import math

import numpy as np
import pytest
from scipy.special import erfc

from flowlab import (MollifierSpec, NoiseGrid, build_covariance, heat_kernel,
                     scale_params, she_mass_second_moment, she_second_moment,
                     smoothing_error, solve_q, solve_q_lambda)
from flowlab.errors import (DivergenceError, ResolutionError, ValidationError)
from flowlab.qpde import (aronson_check, duhamel_iterate, duhamel_richardson,
                          expected_occupation_weight)


@pytest.fixture(scope="module")
def cov():
    return build_covariance(MollifierSpec("triangle-smooth", 1.0, 513))


@pytest.fixture(scope="module")
def qgrid():
    return NoiseGrid(L=6.0, nx=2048, dt=1.0, seed=0)


def she_exact(kappa, nu, t):
    # Laplace-transform closed form of the second-moment equation
    g = 1.0 / math.sqrt(4 * math.pi * nu * t)
    a = kappa ** 2 / (2 * math.sqrt(nu))
    return g + (a / (2 * math.sqrt(nu))) * math.exp(a * a * t) * erfc(-a * math.sqrt(t))


def test_solve_q_gaussian_case(qgrid):
    # zero covariance: the separation is Brownian with variance 2 sigma^2 t
    cov0 = build_covariance(MollifierSpec("triangle-smooth", 0.0, 513))
    p = scale_params(cov0, 0.1, 1.0, 1.0, 0.0)
    q = solve_q(cov0, p, 0.5, qgrid)
    exact = heat_kernel(2.0, 0.5, q.field.x, period=2 * qgrid.L)
    assert np.abs(q.values - exact).max() < 1e-4
    assert q.mass == pytest.approx(1.0, abs=1e-8)


def test_solve_q_mass_conserved_at_all_times(cov, qgrid):
    p = scale_params(cov, 0.1, 1.0, 1.0, 0.0)
    _, snaps = solve_q(cov, p, 0.4, qgrid, snapshot_times=[0.1, 0.2, 0.3, 0.4])
    for s in snaps:
        assert s.mass == pytest.approx(1.0, abs=1e-8)


def test_solve_q_lambda_zero_is_bitwise_solve_q(cov, qgrid):
    p = scale_params(cov, 0.1, 1.0, 1.0, 0.0)
    qa = solve_q(cov, p, 0.3, qgrid)
    qb = solve_q_lambda(cov, p, 0.3, qgrid)
    assert np.array_equal(qa.values, qb.values)


def test_solve_q_resolution_guards(cov):
    coarse = NoiseGrid(L=6.0, nx=128, dt=1.0, seed=0)
    p = scale_params(cov, 0.1, 1.0, 1.0, 0.0)
    with pytest.raises(ResolutionError):
        solve_q(cov, p, 0.3, coarse)
    p0 = scale_params(cov, 0.1, 1.0, 0.0, 0.0)
    with pytest.raises(ValidationError):
        solve_q(cov, p0, 0.3, NoiseGrid(L=6.0, nx=2048, dt=1.0))


def test_q_solution_even_and_nonnegative(cov, qgrid):
    p = scale_params(cov, 0.1, 1.0, 1.0, 2.0)
    q = solve_q_lambda(cov, p, 0.5, qgrid)
    v = q.values
    # reflection on the periodic grid keeps cell 0 (x = -L) fixed
    v_ref = np.concatenate([v[:1], v[1:][::-1]])
    assert np.abs(v - v_ref).max() < 1e-10 * v.max()
    assert v.min() > -1e-12
    assert q.mass >= 1.0


def test_q_lambda_monotone_in_lambda(cov, qgrid):
    q0s = []
    for lam in (0.0, 0.5, 1.0, 2.0):
        p = scale_params(cov, 0.1, 1.0, 1.0, lam)
        q0s.append(solve_q_lambda(cov, p, 0.4, qgrid).q0)
    assert all(b > a - 1e-12 for a, b in zip(q0s, q0s[1:]))


def test_duhamel_lambda_zero_single_iteration(cov, qgrid):
    p = scale_params(cov, 0.2, 1.0, 1.0, 0.0)
    q = duhamel_iterate(cov, p, 0.25, qgrid, max_iter=1, panels=32)
    qd = solve_q(cov, p, 0.25, qgrid, dt=0.25 / (32 * 8))
    assert np.abs(q.values - qd.values).max() < 5e-4


def test_duhamel_matches_direct_solver(cov, qgrid):
    p = scale_params(cov, 0.2, 1.0, 1.0, 1.0)
    qd = duhamel_richardson(cov, p, 0.25, qgrid, panels=128, substeps=16)
    qs = solve_q_lambda(cov, p, 0.25, qgrid, dt=0.25 / 8192)
    assert np.abs(qd.values - qs.values).max() < 1e-4


def test_duhamel_first_order_perturbation(cov, qgrid):
    # one Picard sweep: (output - q)/lam^2 is lambda-independent
    t = 0.25
    outs = {}
    for lam in (0.1, 0.2):
        p = scale_params(cov, 0.2, 1.0, 1.0, lam)
        q1 = duhamel_iterate(cov, p, t, qgrid, max_iter=1, tol=1e9, panels=64,
                             substeps=8)
        p0 = scale_params(cov, 0.2, 1.0, 1.0, 0.0)
        q0 = duhamel_iterate(cov, p0, t, qgrid, max_iter=1, tol=1e9, panels=64,
                             substeps=8)
        outs[lam] = (q1.values - q0.values) / lam ** 2
    num = np.abs(outs[0.1] - outs[0.2]).max()
    den = np.abs(outs[0.2]).max()
    assert num < 0.01 * den


def test_duhamel_divergence_error(cov, qgrid):
    p = scale_params(cov, 0.2, 1.0, 1.0, 1.0)
    with pytest.raises(DivergenceError) as exc:
        duhamel_iterate(cov, p, 0.25, qgrid, max_iter=2, tol=1e-14, panels=32)
    assert exc.value.residual is not None


def test_she_second_moment_free_case():
    assert she_second_moment(0.0, 1.0, 0.5) == pytest.approx(
        1.0 / math.sqrt(2 * math.pi), rel=1e-12)


def test_she_second_moment_small_kappa_expansion():
    # r ~ p_t(0) + kappa^2 int p_{t-s}(0) p_s(0) ds with the explicit first
    # order term kappa^2/(4 nu)
    nu, t = 1.0, 0.5
    kappa2 = 0.01
    first = 1.0 / math.sqrt(4 * math.pi * nu * t) + kappa2 / (4.0 * nu)
    val = she_second_moment(math.sqrt(kappa2), nu, t)
    assert abs(val - first) < 1e-4


def test_she_second_moment_closed_form():
    for kappa, nu, t in ((0.7, 1.0, 0.5), (1.0, 1.0, 0.5), (1.3, 2.0, 0.8)):
        val, err = she_second_moment(kappa, nu, t, with_error=True)
        assert val == pytest.approx(she_exact(kappa, nu, t), rel=5e-5)
        assert err < 5e-5 * val


def test_she_mass_second_moment_small_kappa():
    # E[mass^2] = 1 + kappa^2 E[local time] + O(kappa^4)
    nu, t = 1.0, 0.5
    kappa = 0.05
    lead = 1.0 + kappa ** 2 * math.sqrt(t / (math.pi * nu))
    assert she_mass_second_moment(kappa, nu, t) == pytest.approx(lead, abs=2e-5)


def test_smoothing_error_properties(cov, qgrid):
    p = scale_params(cov, 0.1, 1.0, 1.0, 1.0)
    q = solve_q_lambda(cov, p, 0.4, qgrid)
    val = smoothing_error(q, cov, p.eps)
    assert val >= 0.0
    # constant density has zero increments
    from flowlab.qpde import QSolution
    from flowlab.spde import GridField
    flat = QSolution(field=GridField(np.ones(qgrid.nx), 0.4, qgrid.cells(),
                                     qgrid.dx), lam=1.0, t=0.4)
    assert smoothing_error(flat, cov, p.eps) == pytest.approx(0.0, abs=1e-14)


def test_smoothing_error_quartic_scaling_for_smooth_density(cov):
    # the quadratic Taylor terms cancel exactly (the self-convolution has
    # twice the profile's second moment), so a smooth density mismatches at
    # fourth order: halving eps divides the error by ~16
    from flowlab.qpde import QSolution
    from flowlab.spde import GridField, heat_kernel as hk
    fine = NoiseGrid(L=6.0, nx=8192, dt=1.0, seed=0)
    x = fine.cells()
    smooth = QSolution(field=GridField(hk(1.0, 0.5, x), 0.5, x, fine.dx),
                       lam=0.0, t=0.5)
    e1 = smoothing_error(smooth, cov, 0.4)
    e2 = smoothing_error(smooth, cov, 0.2)
    assert e1 > 0.0 and e2 > 0.0
    assert 11.0 < e1 / e2 < 18.0


def test_aronson_envelope_gaussian_case(qgrid):
    cov0 = build_covariance(MollifierSpec("triangle-smooth", 0.0, 513))
    p = scale_params(cov0, 0.1, 1.0, 1.0, 0.0)
    _, snaps = solve_q(cov0, p, 0.5, qgrid,
                       snapshot_times=[0.125, 0.25, 0.375, 0.5])
    fit = aronson_check(snaps)
    assert fit.violations == 0
    # exact envelope rate for variance 2 sigma^2 t is 1/(2 sigma^2)
    assert fit.c == pytest.approx(0.5, rel=0.05)


def test_aronson_envelope_variable_coefficients(cov, qgrid):
    p = scale_params(cov, 0.1, 1.0, 1.0, 0.0)
    _, snaps = solve_q(cov, p, 0.5, qgrid,
                       snapshot_times=[0.125, 0.25, 0.375, 0.5])
    fit = aronson_check(snaps)
    assert fit.violations == 0
    # rate lies in the band set by the diffusivity range [sigma^2, nu]
    assert 0.9 / (2.0 * p.nu) <= fit.c <= 1.1 / (2.0 * p.sigma ** 2)


def test_aronson_constants_stable_across_eps(cov, qgrid):
    cs, Cs = [], []
    for eps in (0.2, 0.1, 0.05):
        p = scale_params(cov, eps, 1.0, 1.0, 0.0)
        grid = NoiseGrid(L=6.0, nx=4096, dt=1.0, seed=0) if eps < 0.1 else qgrid
        _, snaps = solve_q(cov, p, 0.5, grid,
                           snapshot_times=[0.125, 0.25, 0.375, 0.5])
        fit = aronson_check(snaps)
        cs.append(fit.c)
        Cs.append(fit.C)
        assert fit.violations == 0
    assert max(cs) / min(cs) - 1.0 < 0.10
    assert max(Cs) / min(Cs) - 1.0 < 0.10


def test_equicontinuity_proxy_across_eps(cov):
    # modulus of continuity of q_lam(t, .) on [-1, 1] stays bounded along eps
    t, delta = 0.4, 0.05
    mods = []
    for eps, nx in ((0.2, 2048), (0.1, 2048), (0.05, 4096)):
        mu = math.sqrt(eps) / math.log(1.0 / eps)
        sigma = math.sqrt(1.0 - mu ** 2 * cov.C0)
        lam = 1.0 / (mu * math.sqrt(eps))
        p = scale_params(cov, eps, mu, sigma, lam)
        grid = NoiseGrid(L=6.0, nx=nx, dt=1.0, seed=0)
        q = solve_q_lambda(cov, p, t, grid)
        x = q.field.x
        keep = np.abs(x) <= 1.0
        vals = q.values[keep]
        shift = int(round(delta / grid.dx))
        mod = np.abs(vals[shift:] - vals[:-shift]).max()
        mods.append(mod)
    assert max(mods) < 2.5 * min(mods) + 0.05


def test_occupation_weight_trend_below_line(cov):
    # with lam mu sqrt(eps)/sqrt(sigma) held fixed, E[A_t] stays level
    vals = []
    for eps in (0.2, 0.1, 0.05):
        mu = 1.0
        sigma = 1.0
        lam = 0.8 / (mu * math.sqrt(eps))   # fixed ratio
        p = scale_params(cov, eps, mu, sigma, lam)
        nx = 2048 if eps >= 0.1 else 4096
        grid = NoiseGrid(L=6.0, nx=nx, dt=1.0, seed=0)
        vals.append(expected_occupation_weight(cov, p, 0.25, grid))
    assert max(vals) < 1.3 * min(vals)
