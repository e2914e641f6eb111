"""Experiment configuration: structured key/value text with sections
mollifier, grid, noise, schedule, experiment.

Configs resolve to concrete parameter sets deterministically; the hash of the
resolved mapping identifies a run, so identical configs reproduce identical
outputs byte for byte.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field as dc_field

from .covariance import (CovarianceSpec, MollifierSpec, ScaleParams,
                         build_covariance, scale_params)
from .errors import ValidationError
from .noise import NoiseGrid
from .regimes import RegimePoint, schedule
from .spde import FLUX_FORMS, SpdeScheme

KINDS = ("mean-kernel", "second-moment", "critical-line", "weak-disorder",
         "strong-disorder", "phase-sweep")


@dataclass
class ExperimentConfig:
    """Parsed and validated configuration for one experiment."""

    mollifier: MollifierSpec
    L: float
    nx: int
    dt: float | None
    seed: int
    kind: str
    times: list
    replicas: int
    scheme: SpdeScheme
    # single-scale parameters (explicit schedule)
    eps: float | None = None
    mu: float | None = None
    sigma: float | None = None
    lam: float | None = None
    # exponent-driven schedule
    alpha: float | None = None
    beta: float | None = None
    eps_list: list = dc_field(default_factory=list)
    kappa_target: float | None = None
    nu_target: float | None = None
    lambda0: float = 1.0
    kappa_list: list = dc_field(default_factory=list)
    # phase sweep
    alpha_range: tuple | None = None
    beta_range: tuple | None = None
    grid_points: int = 0
    raw: dict = dc_field(default_factory=dict)

    def covariance(self) -> CovarianceSpec:
        return build_covariance(self.mollifier)

    def params(self, cov: CovarianceSpec) -> ScaleParams:
        """Single-scale parameters (explicit schedule section)."""
        if self.eps is None:
            raise ValidationError("schedule.eps: explicit parameters required "
                                  "for this experiment kind")
        return scale_params(cov, self.eps, self.mu, self.sigma, self.lam)

    def schedule_params(self, cov: CovarianceSpec) -> list[ScaleParams]:
        pt = RegimePoint(alpha=self.alpha, beta=self.beta)
        return schedule(pt, self.eps_list, cov, kappa_target=self.kappa_target,
                        lambda0=self.lambda0, nu_target=self.nu_target)

    def noise_grid(self, dt: float) -> NoiseGrid:
        return NoiseGrid(L=self.L, nx=self.nx, dt=dt, seed=self.seed)

    def auto_dt(self, cov: CovarianceSpec, p: ScaleParams, lam_term: float,
                t_first: float) -> float:
        """Largest noise step satisfying the stability validators and dividing
        the first output time (all later output times must be its multiples)."""
        dx = 2.0 * self.L / self.nx
        dt = self.scheme.stability_factor * dx * dx / p.nu
        if lam_term != 0.0 and p.mu > 0.0 and cov.C0 > 0.0:
            dt = min(dt, dx / (10.0 * abs(lam_term) * p.mu * math.sqrt(cov.C0 / p.eps)))
        n = max(1, math.ceil(t_first / dt - 1e-12))
        return t_first / n

    def resolved_mapping(self) -> dict:
        """Flat, ordered, stringified view of the resolved configuration."""
        out = {}
        for section in sorted(self.raw):
            for key in sorted(self.raw[section]):
                out[f"{section}.{key}"] = self.raw[section][key]
        return out

    def config_hash(self) -> str:
        payload = "\n".join(f"{k}={v}" for k, v in self.resolved_mapping().items())
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _floats(text: str) -> list:
    return [float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()]


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document; collects every violation."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    errors = []

    def get(section, key, conv, default=None, required=False):
        if not cp.has_option(section, key):
            if required:
                errors.append(f"{section}.{key}: missing required key")
            return default
        try:
            return conv(cp.get(section, key))
        except (ValueError, ValidationError) as exc:
            errors.append(f"{section}.{key}: {exc}")
            return default

    shape = get("mollifier", "shape", str, default="triangle-smooth")
    mass = get("mollifier", "mass", float, default=1.0)
    samples = get("mollifier", "samples", int, default=2049)
    L = get("grid", "L", float, required=True)
    nx = get("grid", "nx", int, required=True)
    dt = get("grid", "dt", float)
    seed = get("noise", "seed", int, default=0)
    kind = get("experiment", "kind", str, required=True)
    times = get("experiment", "times", _floats, default=[])
    t_single = get("experiment", "t", float)
    if t_single is not None:
        times = times + [t_single] if t_single not in times else times
    replicas = get("experiment", "replicas", int, default=200)
    sf = get("experiment", "stability_factor", float, default=0.25)
    flux = get("experiment", "flux_form", str, default="conservative-central")

    if kind is not None and kind not in KINDS:
        errors.append(f"experiment.kind: unknown kind {kind!r}, expected one of {KINDS}")
    if nx is not None and (nx < 8 or nx % 2 != 0):
        errors.append("grid.nx: must be even and at least 8")
    if L is not None and L <= 0:
        errors.append("grid.L: must be positive")
    if dt is not None and dt <= 0:
        errors.append("grid.dt: must be positive")
    if replicas is not None and replicas < 1:
        errors.append("experiment.replicas: must be at least 1")
    if times and sorted(times) != times:
        errors.append("experiment.times: must be increasing")
    if flux not in FLUX_FORMS:
        errors.append(f"experiment.flux_form: unknown value {flux!r}")
    if not (0.0 < sf < 1.0):
        errors.append("experiment.stability_factor: must lie in (0, 1)")

    cfg_kwargs = dict(
        eps=get("schedule", "eps", float),
        mu=get("schedule", "mu", float, default=1.0),
        sigma=get("schedule", "sigma", float, default=1.0),
        lam=get("schedule", "lambda", float, default=0.0),
        alpha=get("schedule", "alpha", float),
        beta=get("schedule", "beta", float),
        eps_list=get("schedule", "eps_list", _floats, default=[]),
        kappa_target=get("schedule", "kappa_target", float),
        nu_target=get("schedule", "nu_target", float),
        lambda0=get("schedule", "lambda0", float, default=1.0),
        kappa_list=get("schedule", "kappa_list", _floats, default=[]),
    )
    if cp.has_option("experiment", "alpha_range"):
        cfg_kwargs["alpha_range"] = tuple(get("experiment", "alpha_range", _floats))
    if cp.has_option("experiment", "beta_range"):
        cfg_kwargs["beta_range"] = tuple(get("experiment", "beta_range", _floats))
    cfg_kwargs["grid_points"] = get("experiment", "grid_points", int, default=9)

    if kind in ("critical-line", "weak-disorder"):
        if cfg_kwargs["alpha"] is None or cfg_kwargs["beta"] is None:
            errors.append("schedule.alpha/beta: required for exponent-driven kinds")
        if not cfg_kwargs["eps_list"]:
            errors.append("schedule.eps_list: required for exponent-driven kinds")
    if kind in ("mean-kernel", "second-moment") and cfg_kwargs["eps"] is None:
        errors.append("schedule.eps: required for field experiments")
    if kind == "strong-disorder":
        if cfg_kwargs["eps"] is None:
            errors.append("schedule.eps: required for strong-disorder runs")
        if not cfg_kwargs["kappa_list"]:
            errors.append("schedule.kappa_list: required for strong-disorder runs")
    if kind != "phase-sweep" and not times:
        errors.append("experiment.times: at least one output time is required")

    if errors:
        raise ValidationError("invalid configuration:\n  " + "\n  ".join(errors))

    try:
        moll = MollifierSpec(shape=shape, mass=mass, samples=samples)
        scheme = SpdeScheme(flux_form=flux, stability_factor=sf)
    except ValidationError as exc:
        raise ValidationError(f"invalid configuration:\n  {exc}") from exc

    raw = {s: dict(cp.items(s)) for s in cp.sections()}
    return ExperimentConfig(mollifier=moll, L=L, nx=nx, dt=dt, seed=seed,
                            kind=kind, times=times, replicas=replicas,
                            scheme=scheme, raw=raw, **cfg_kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
