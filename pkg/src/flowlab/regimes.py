"""Phase-diagram bookkeeping: exponent points, regime classification, and
parameter schedules realizing a given exponent pair along a list of scales.

Exponent conventions: beta is the tilt growth rate (lambda ~ eps^-beta) and
alpha the environment-to-diffusivity balance (mu/sigma ~ eps^-alpha).  The
critical line is beta = 1/2 - alpha for alpha < 0 (proven heat-equation
noise limit) and beta = (1 - alpha)/2 for alpha >= 0 (conjectured, including
the diffusive point (0, 1/2)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .covariance import CovarianceSpec, ScaleParams, scale_params
from .errors import ValidationError

REGIME_LABELS = ("weak-disorder", "critical-SHE-proven", "critical-SHE-conjectured",
                 "strong-disorder", "sticky-boundary", "arratia-boundary")

_TOL = 1e-12


def _isclose(a: float, b: float) -> bool:
    return abs(a - b) <= _TOL * max(1.0, abs(a), abs(b))


@dataclass(frozen=True)
class RegimePoint:
    """A point (alpha, beta) on the exponent diagram."""

    alpha: float
    beta: float
    side: str = field(init=False)

    def __post_init__(self):
        if not (self.beta >= 0.0):
            raise ValidationError("beta must be non-negative")
        if self.alpha < 0.0:
            side = "weak-env"
        elif self.alpha > 0.0:
            side = "weak-diff"
        else:
            side = "neutral"
        object.__setattr__(self, "side", side)


def critical_beta(alpha: float) -> float:
    """Height of the critical line above alpha."""
    return 0.5 - alpha if alpha <= 0.0 else 0.5 * (1.0 - alpha)


def classify_regime(pt: RegimePoint) -> str:
    """Label the limiting behaviour of the tilted kernel at an exponent point.

    Boundary flows (sticky at (1, 0), coalescing for alpha > 1 at beta = 0)
    are labels only; no coalescing-flow simulator backs them.
    """
    if _isclose(pt.beta, 0.0):
        if _isclose(pt.alpha, 1.0):
            return "sticky-boundary"
        if pt.alpha > 1.0:
            return "arratia-boundary"
    crit = critical_beta(pt.alpha)
    if _isclose(pt.beta, crit):
        return "critical-SHE-proven" if pt.alpha < 0.0 else "critical-SHE-conjectured"
    return "weak-disorder" if pt.beta < crit else "strong-disorder"


def schedule(pt: RegimePoint, eps_list, cov: CovarianceSpec,
             kappa_target: float | None = None, lambda0: float = 1.0,
             nu_target: float | None = None) -> list[ScaleParams]:
    """Realize the exponents along a decreasing list of scales.

    mu(eps) = eps^max(-alpha, 0), with the logarithmic damping 1/log(1/eps)
    added only on the proven critical line (the noise-limit theorem requires
    mu to vanish faster than log(1/eps)^{-1/2}); sigma(eps) = eps^max(alpha, 0)
    unless nu_target is given, in which case sigma is adjusted so the total
    diffusivity is exactly nu_target at every scale.  On the critical line
    with kappa_target set, lambda is rescaled so kappa_eps hits the target
    exactly; otherwise lambda = lambda0 * eps^-beta.
    """
    eps_list = list(eps_list)
    if not eps_list or any(not (0.0 < e < 1.0) for e in eps_list):
        raise ValidationError("eps_list entries must lie in (0, 1)")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValidationError("eps_list must be strictly decreasing")
    label = classify_regime(pt)
    on_critical = label in ("critical-SHE-proven", "critical-SHE-conjectured")
    mass = cov.rho.mass
    if kappa_target is not None and mass == 0.0:
        raise ValidationError("kappa target requires a mollifier with mass > 0")

    out = []
    for eps in eps_list:
        log_inv = math.log(1.0 / eps)
        mu = eps ** max(-pt.alpha, 0.0)
        if label == "critical-SHE-proven":
            mu /= log_inv
        if nu_target is not None:
            s2 = nu_target - mu ** 2 * cov.C0
            if s2 <= 0.0:
                raise ValidationError(
                    f"nu_target = {nu_target} is below the environment part "
                    f"mu^2 C(0) = {mu ** 2 * cov.C0} at eps = {eps}")
            sigma = math.sqrt(s2)
        else:
            sigma = eps ** max(pt.alpha, 0.0)
        if on_critical and kappa_target is not None:
            lam = kappa_target / (mu * math.sqrt(eps) * mass)
        else:
            lam = lambda0 * eps ** (-pt.beta)
        out.append(scale_params(cov, eps, mu, sigma, lam))
    return out


def theorem_hypothesis_flags(params: list[ScaleParams]) -> list[float]:
    """mu(eps) sqrt(log(1/eps)) along a schedule; must decrease on the proven
    critical line for the noise-limit hypothesis to hold."""
    return [p.mu * math.sqrt(math.log(1.0 / p.eps)) for p in params]
