"""Mollifier profiles, the covariance table C = rho*rho, and its scalar functionals.

Everything downstream (noise synthesis, the two-point motion, the weighted
separation density) evaluates the covariance through the table built here, so
the table is constructed once, at full resolution, and then only interpolated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad, simpson

from .errors import SingularityError, ValidationError

PROFILES = ("triangle-smooth", "bump", "truncated-cosine")

# mass of exp(-1/(1-y^2)) on (-1, 1), used to normalise the bump profile
_BUMP_MASS = quad(lambda y: math.exp(-1.0 / (1.0 - y * y)), -1.0, 1.0,
                  epsabs=1e-14, epsrel=1e-14)[0]


def profile_values(shape: str, y) -> np.ndarray:
    """Evaluate the unit-mass profile for `shape` at positions `y`.

    All profiles are symmetric, non-negative, supported on [-1, 1] and have
    unit integral; multiplying by `mass` gives the working mollifier.
    """
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    u = np.abs(y[inside])
    if shape == "triangle-smooth":
        # cubic B-spline squeezed onto [-1, 1]: C^2 smoothing of the triangle
        near = u <= 0.5
        v = np.empty_like(u)
        v[near] = (4.0 - 24.0 * u[near] ** 2 + 24.0 * u[near] ** 3) / 3.0
        v[~near] = (8.0 / 3.0) * (1.0 - u[~near]) ** 3
        out[inside] = v
    elif shape == "bump":
        out[inside] = np.exp(-1.0 / (1.0 - u * u)) / _BUMP_MASS
    elif shape == "truncated-cosine":
        out[inside] = 0.5 * (1.0 + np.cos(np.pi * u))
    else:
        raise ValidationError(f"unknown mollifier shape {shape!r}; "
                              f"expected one of {PROFILES}")
    return out


@dataclass(frozen=True)
class MollifierSpec:
    """Choice of symmetric compactly supported profile rho on [-1, 1].

    samples is the number of tabulation points across the support; it is
    coerced to an odd count so composite Simpson rules apply directly.
    """

    shape: str = "triangle-smooth"
    mass: float = 1.0
    samples: int = 2049

    def __post_init__(self):
        if self.shape not in PROFILES:
            raise ValidationError(f"unknown mollifier shape {self.shape!r}")
        if not (self.mass >= 0.0 and math.isfinite(self.mass)):
            raise ValidationError("mollifier mass must be finite and >= 0")
        if self.samples < 65:
            raise ValidationError("mollifier needs at least 65 tabulation points")
        if self.samples % 2 == 0:
            object.__setattr__(self, "samples", self.samples + 1)

    def tabulate(self):
        """Return (y, rho(y)) on the uniform tabulation grid over [-1, 1]."""
        y = np.linspace(-1.0, 1.0, self.samples)
        return y, self.mass * profile_values(self.shape, y)


@dataclass(frozen=True)
class CovarianceSpec:
    """Tabulated covariance C = rho*rho on [-2, 2] with its scalar functionals.

    Immutable after construction; safe to share read-only across workers.
    """

    rho: MollifierSpec
    y: np.ndarray          # covariance grid over [-2, 2]
    C: np.ndarray          # covariance values on that grid
    rho_y: np.ndarray      # mollifier grid over [-1, 1]
    rho_values: np.ndarray
    C0: float              # C(0)
    C2: float              # C''(0), strictly negative unless mass == 0
    intC: float            # integral of C, equals mass^2 by Fubini
    h: float               # tabulation step

    def rho_at(self, x) -> np.ndarray:
        """Linear interpolation of the base mollifier, zero outside [-1, 1]."""
        return np.interp(x, self.rho_y, self.rho_values, left=0.0, right=0.0)

    def C_at(self, x) -> np.ndarray:
        """Linear interpolation of the base covariance, zero outside [-2, 2]."""
        return np.interp(x, self.y, self.C, left=0.0, right=0.0)


def build_covariance(rho: MollifierSpec) -> CovarianceSpec:
    """Tabulate C = rho*rho and its scalar functionals.

    The convolution is evaluated by a Riemann product on the tabulation grid;
    since rho vanishes with its derivatives at the support edge the product
    rule is spectrally accurate for the smooth profiles in the menu.  C''(0)
    uses 5-point central differences at the tabulation step.
    """
    ry, rv = rho.tabulate()
    h = ry[1] - ry[0]
    if not np.allclose(rv, rv[::-1], rtol=0.0, atol=1e-12 * max(1.0, rv.max(initial=0.0))):
        raise ValidationError("mollifier tabulation is not symmetric")
    if np.any(rv < 0.0):
        raise ValidationError("mollifier tabulation has negative values")
    quad_mass = simpson(rv, dx=h)
    if abs(quad_mass - rho.mass) > 1e-8 * max(1.0, rho.mass):
        raise ValidationError(
            f"tabulated mollifier mass {quad_mass!r} does not match spec {rho.mass!r}")

    C = np.convolve(rv, rv) * h
    n = rho.samples
    y = np.linspace(-2.0, 2.0, 2 * n - 1)
    i0 = n - 1
    C0 = float(C[i0])
    C2 = float((-C[i0 - 2] + 16.0 * C[i0 - 1] - 30.0 * C[i0]
                + 16.0 * C[i0 + 1] - C[i0 + 2]) / (12.0 * h * h))
    intC = rho.mass ** 2
    quad_intC = simpson(C, dx=h)
    if abs(quad_intC - intC) > 1e-8 * max(1.0, intC):
        raise ValidationError("covariance table integral disagrees with mass^2")
    if rho.mass > 0.0 and C2 >= 0.0:
        raise ValidationError("degenerate profile: C''(0) must be negative")
    return CovarianceSpec(rho=rho, y=y, C=C, rho_y=ry, rho_values=rv,
                          C0=C0, C2=C2, intC=intC, h=h)


@dataclass(frozen=True)
class ScaleParams:
    """The parameter quintuple at one correlation scale.

    nu and kappa_eps are derived; alpha and beta are the exponents read off at
    this eps (NaN when undefined).  Invariant: nu = sigma^2 + mu^2 C(0) and
    kappa_eps = lam * mu * sqrt(eps) * mass.
    """

    eps: float
    mu: float
    sigma: float
    lam: float
    nu: float
    kappa_eps: float
    alpha: float
    beta: float


def scale_params(cov: CovarianceSpec, eps: float, mu: float, sigma: float,
                 lam: float) -> ScaleParams:
    """Build ScaleParams with the derived quantities filled in."""
    if not (0.0 < eps < 1.0 or eps == 1.0):
        raise ValidationError("eps must lie in (0, 1]")
    if mu < 0.0 or sigma < 0.0:
        raise ValidationError("mu and sigma must be non-negative")
    if mu == 0.0 and sigma == 0.0:
        raise ValidationError("at least one of mu, sigma must be positive")
    nu = sigma ** 2 + mu ** 2 * cov.C0
    kappa_eps = lam * mu * math.sqrt(eps) * cov.rho.mass
    log_eps = math.log(eps) if eps != 1.0 else float("nan")
    alpha = -math.log(mu / sigma) / log_eps if (mu > 0 and sigma > 0 and eps != 1.0) else float("nan")
    beta = -math.log(abs(lam)) / log_eps if (lam != 0.0 and eps != 1.0) else float("nan")
    return ScaleParams(eps=eps, mu=mu, sigma=sigma, lam=lam, nu=nu,
                       kappa_eps=kappa_eps, alpha=alpha, beta=beta)


def scaled_covariance(cov: CovarianceSpec, p: ScaleParams, y) -> np.ndarray:
    """Evaluate mu^2 C(y/eps); zero outside the support |y| >= 2 eps.

    This is the hottest scalar call in the two-point simulator, hence plain
    linear interpolation on the prebuilt table.
    """
    return p.mu ** 2 * cov.C_at(np.asarray(y, dtype=float) / p.eps)


def a_eps(cov: CovarianceSpec, p: ScaleParams, y) -> np.ndarray:
    """Diffusion coefficient of the separation process: sigma^2 + C^eps(0) - C^eps(y).

    Bounded between sigma^2 (at the origin) and nu (off the support).
    """
    return p.nu - scaled_covariance(cov, p, y)


def kappa2_weak_env(cov: CovarianceSpec, sigma: float) -> float:
    """Noise-strength prediction in the weak-environment limit.

    Returns nu * integral of C(y) / (sigma^2 + C(0) - C(y)) dy with
    nu = sigma^2 + C(0), by composite Simpson over the covariance support.
    """
    if sigma < 0.0:
        raise ValidationError("sigma must be non-negative")
    if sigma == 0.0:
        raise SingularityError(
            "sigma = 0 makes the integrand non-integrable at the origin "
            "(C(0) - C(y) vanishes quadratically)")
    nu = sigma ** 2 + cov.C0
    integrand = cov.C / (sigma ** 2 + cov.C0 - cov.C)
    full = simpson(integrand, dx=cov.h)
    half = simpson(integrand[::2], dx=2.0 * cov.h)
    if abs(full - half) > 1e-8 * max(abs(full), 1e-300) + 1e-15:
        raise SingularityError("quadrature for kappa^2 did not converge at "
                               "the tabulated resolution")
    return nu * full


def kappa2_weak_diff(cov: CovarianceSpec, c: float) -> float:
    """Noise-strength prediction in the weak-diffusivity limit.

    Returns sqrt(2) * c * nu * C(0) / sqrt(|C''(0)|) with nu = C(0), the
    limiting diffusivity when the molecular part vanishes.
    """
    if c < 0.0:
        raise ValidationError("c must be non-negative")
    if cov.C0 == 0.0:
        return 0.0
    if cov.C2 >= 0.0:
        raise ValidationError("C''(0) must be negative")
    nu = cov.C0
    return math.sqrt(2.0) * c * nu * cov.C0 / math.sqrt(abs(cov.C2))


def write_covariance_csv(cov: CovarianceSpec, path) -> None:
    """Export the covariance table as CSV with columns y, C(y)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("y,C(y)\n")
        for yi, ci in zip(cov.y, cov.C):
            fh.write(f"{yi:.17g},{ci:.17g}\n")
