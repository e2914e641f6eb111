"""Experiment orchestration: dispatch by experiment kind, CSV persistence,
and the strong-disorder mass diagnostic.

Outputs are plain CSV (one row per cell) plus a manifest carrying the config
hash and library versions; given (config, seed) every CSV byte is reproducible.
Timestamps live only in the manifest.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import scipy
from scipy.special import erfc

from . import __version__
from .config import ExperimentConfig
from .covariance import (CovarianceSpec, ScaleParams, scale_params,
                         write_covariance_csv)
from .errors import FlowLabError, ValidationError
from .noise import NoiseGrid
from .qpde import she_second_moment, solve_q_lambda
from .regimes import RegimePoint, classify_regime
from .particles import fk_density_at_zero
from .spde import EnsembleStats, heat_kernel, run_transport_ensemble

_FMT = "%.17g"


class PartialFailureError(FlowLabError):
    """Some cells of a multi-cell experiment failed; completed records persist."""

    def __init__(self, message, records=None, failures=None):
        super().__init__(message)
        self.records = records or []
        self.failures = failures or []


@dataclass
class ExperimentRecord:
    """What one experiment cell produced: named observables with standard errors."""

    config_hash: str
    seed: int
    regime_label: str
    observables: dict
    timestamps: dict
    outputs: list = dc_field(default_factory=list)


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % v if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, records) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.resolved_mapping(),
        "versions": {"flowlab": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "records": [
            {"config_hash": r.config_hash, "seed": r.seed,
             "regime_label": r.regime_label,
             "observables": {k: {"value": v[0], "se": v[1]}
                             for k, v in r.observables.items()},
             "timestamps": r.timestamps, "outputs": r.outputs}
            for r in records
        ],
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def write_field_csvs(stats: EnsembleStats, out_dir: Path, prefix: str = "field") -> list:
    """field_t<t>.csv (y, mean, variance, replica quantiles) and mass_series.csv."""
    out = []
    for i, t in enumerate(stats.times):
        name = f"{prefix}_t{t:g}.csv"
        header = ["y", "mean", "variance"]
        cols = [stats.x, stats.mean[i], stats.var[i]]
        if stats.quantiles is not None:
            for qi, lev in enumerate(stats.quantile_levels):
                header.append(f"q{int(round(100 * lev)):02d}")
                cols.append(stats.quantiles[i, qi])
        _write_csv(out_dir / name, header, zip(*cols))
        out.append(name)
    rows = [(float(t), float(stats.mass[i].mean()),
             float(stats.mass[i].var(ddof=1)) if stats.replicas > 1 else 0.0)
            for i, t in enumerate(stats.times)]
    _write_csv(out_dir / "mass_series.csv", ["t", "mean_mass", "var_mass"], rows)
    out.append("mass_series.csv")
    return out


def mass_escape_scale(cov: CovarianceSpec, eps: float, nu: float, t: float,
                      threshold: float = 0.05) -> float:
    """Smallest half-width a with P(|sqrt(t) Z + eps W| > a) below threshold,
    Z centred Gaussian with variance nu and W distributed by the unit-mass
    profile.  This pins the constant in the mass-decay bound."""
    if cov.rho.mass <= 0.0:
        raise ValidationError("mass-escape scale needs a mollifier with mass > 0")
    w = cov.rho_y
    dens = cov.rho_values / cov.rho.mass
    s = math.sqrt(nu * t)
    h = w[1] - w[0]
    for a in np.arange(0.25, 40.0, 0.05):
        tail = 0.5 * (erfc((a - eps * w) / (s * math.sqrt(2.0)))
                      + erfc((a + eps * w) / (s * math.sqrt(2.0))))
        if float(np.sum(dens * tail) * h) < threshold:
            return float(a)
    raise ValidationError("no decay scale below threshold found")


def strong_disorder_diagnostic(cfg: ExperimentConfig, cov: CovarianceSpec,
                               replicas: int, times) -> dict:
    """Tilted-equation ensembles along a ladder of noise strengths.

    For each kappa target the run records E[sqrt(total mass)] with its
    standard error over the output times, fits the exponential decay rate,
    and reports it next to the predicted rate kappa_eps^2 / (8 a) with a
    chosen by the 5% mass-escape criterion.
    """
    eps = cfg.eps
    results = []
    for kappa in cfg.kappa_list:
        mu = cfg.mu if cfg.mu is not None else 1.0
        sigma = cfg.sigma if cfg.sigma is not None else 1.0
        lam = kappa / (mu * math.sqrt(eps) * cov.rho.mass)
        p = scale_params(cov, eps, mu, sigma, lam)
        dt = cfg.dt or cfg.auto_dt(cov, p, lam, times[0])
        grid = cfg.noise_grid(dt)
        stats = run_transport_ensemble(grid, cov, p, t_out=times,
                                       replicas=replicas, lam_term=lam,
                                       scheme=cfg.scheme)
        root = np.sqrt(np.maximum(stats.mass, 0.0))
        mean = root.mean(axis=1)
        se = root.std(axis=1, ddof=1) / math.sqrt(replicas)
        a = mass_escape_scale(cov, eps, p.nu, times[-1])
        predicted = p.kappa_eps ** 2 / (8.0 * a)
        # fit the decay rate on the cleanly decaying window
        mask = (mean > 1e-3) & (mean < 0.95)
        fitted = float("nan")
        if mask.sum() >= 2:
            fitted = -float(np.polyfit(stats.times[mask], np.log(mean[mask]), 1)[0])
        results.append({"kappa_eps": p.kappa_eps, "lam": lam, "nu": p.nu,
                        "times": stats.times, "mean_root_mass": mean,
                        "se_root_mass": se, "fitted_rate": fitted,
                        "predicted_rate": predicted, "a": a})
    return {"eps": eps, "results": results}


def _now() -> dict:
    return {"created_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())}


def _record(cfg, label, observables, outputs, seed=None) -> ExperimentRecord:
    return ExperimentRecord(config_hash=cfg.config_hash(),
                            seed=cfg.seed if seed is None else seed,
                            regime_label=label, observables=observables,
                            timestamps=_now(), outputs=outputs)


def _qpde_grid(cfg: ExperimentConfig, eps: float) -> NoiseGrid:
    # the density solver needs dx <= eps/8; widen nx as eps shrinks
    need = 2 * math.ceil(cfg.L / (eps / 8.0))
    nx = max(cfg.nx, need + need % 2)
    return NoiseGrid(L=cfg.L, nx=nx, dt=1.0, seed=cfg.seed)


def _run_mean_kernel(cfg, cov, out_dir, replicas):
    p = cfg.params(cov)
    dt = cfg.dt or cfg.auto_dt(cov, p, 0.0, cfg.times[0])
    grid = cfg.noise_grid(dt)
    stats = run_transport_ensemble(grid, cov, p, t_out=cfg.times,
                                   replicas=replicas, lam_term=0.0,
                                   scheme=cfg.scheme,
                                   quantile_levels=(0.05, 0.25, 0.5, 0.75, 0.95))
    outputs = write_field_csvs(stats, out_dir)
    obs = {}
    for i, t in enumerate(stats.times):
        target = heat_kernel(p.nu, float(t), stats.x, period=2.0 * grid.L)
        err = np.abs(stats.mean[i] - target)
        se = stats.se_mean(i)
        obs[f"sup_error_t{t:g}"] = (float(err.max()), float(se.max()))
    return [_record(cfg, "weak-disorder", obs, outputs)]


def _run_second_moment(cfg, cov, out_dir, replicas):
    p = cfg.params(cov)
    t = cfg.times[-1]
    dt = cfg.dt or cfg.auto_dt(cov, p, p.lam, cfg.times[0])
    grid = cfg.noise_grid(dt)
    stats = run_transport_ensemble(grid, cov, p, t_out=cfg.times,
                                   replicas=replicas, lam_term=p.lam,
                                   scheme=cfg.scheme)
    qsol = solve_q_lambda(cov, p, t, _qpde_grid(cfg, p.eps))
    fk = fk_density_at_zero(cov, p, t, replicas=max(replicas * 100, 500_000),
                            seed=cfg.seed + 1)
    rows, obs = [], {}
    for i, ti in enumerate(stats.times):
        l2 = stats.l2[i]
        mean_l2 = float(l2.mean())
        se_l2 = float(l2.std(ddof=1) / math.sqrt(replicas))
        rows.append((float(ti), mean_l2, se_l2, fk.mean, fk.se, qsol.q0))
        obs[f"spde_l2_t{ti:g}"] = (mean_l2, se_l2)
    obs["fk_q0"] = (fk.mean, fk.se)
    obs["pde_q0"] = (qsol.q0, 0.0)
    _write_csv(out_dir / "moments.csv",
               ["t", "E_weight", "SE", "E_weight_f", "SE_f", "pde_q0"], rows)
    return [_record(cfg, "weak-disorder", obs, ["moments.csv"])]


def _run_q_lambda_table(cfg, cov, out_dir, compare: str):
    params = cfg.schedule_params(cov)
    label = classify_regime(RegimePoint(alpha=cfg.alpha, beta=cfg.beta))
    t = cfg.times[-1]
    records, rows, failures = [], [], []
    for p in params:
        try:
            qsol = solve_q_lambda(cov, p, t, _qpde_grid(cfg, p.eps))
            if compare == "she":
                oracle = she_second_moment(cfg.kappa_target, p.nu, t)
            else:
                oracle = heat_kernel(p.nu, 2.0 * t, np.array([0.0]))[0]
            p2t0 = heat_kernel(p.nu, 2.0 * t, np.array([0.0]))[0]
            rows.append((t, p.eps, p.lam, qsol.q0, qsol.mass, oracle, float(p2t0)))
            records.append(_record(
                cfg, label,
                {f"q0_eps{p.eps:g}": (qsol.q0, 0.0),
                 f"abs_err_eps{p.eps:g}": (abs(qsol.q0 - oracle), 0.0)},
                ["q_lambda.csv"]))
        except FlowLabError as exc:
            failures.append((p.eps, str(exc)))
    _write_csv(out_dir / "q_lambda.csv",
               ["t", "eps", "lambda", "q0", "mass", "she_oracle", "p2t0"], rows)
    if failures:
        raise PartialFailureError(f"{len(failures)} schedule cells failed",
                                  records=records, failures=failures)
    return records


def _run_strong_disorder(cfg, cov, out_dir, replicas):
    diag = strong_disorder_diagnostic(cfg, cov, replicas, cfg.times)
    rows, obs = [], {}
    for res in diag["results"]:
        for ti, m, s in zip(res["times"], res["mean_root_mass"], res["se_root_mass"]):
            rows.append((res["kappa_eps"], float(ti), float(m), float(s),
                         res["fitted_rate"], res["predicted_rate"], res["a"]))
        obs[f"root_mass_k{res['kappa_eps']:g}"] = (
            float(res["mean_root_mass"][-1]), float(res["se_root_mass"][-1]))
    _write_csv(out_dir / "root_mass.csv",
               ["kappa_eps", "t", "mean_root_mass", "se", "fitted_rate",
                "predicted_rate", "a"], rows)
    return [_record(cfg, "strong-disorder", obs, ["root_mass.csv"])]


def _run_phase_sweep(cfg, cov, out_dir):
    a_lo, a_hi = cfg.alpha_range or (-1.0, 1.5)
    b_lo, b_hi = cfg.beta_range or (0.0, 1.5)
    n = max(2, cfg.grid_points)
    rows = []
    for a in np.linspace(a_lo, a_hi, n):
        for b in np.linspace(b_lo, b_hi, n):
            rows.append((float(a), float(b),
                         classify_regime(RegimePoint(alpha=float(a), beta=float(b)))))
    _write_csv(out_dir / "sweep.csv", ["alpha", "beta", "label"], rows)
    return [_record(cfg, "phase-sweep", {}, ["sweep.csv"])]


def run_experiment(cfg: ExperimentConfig, out_dir, replicas: int | None = None,
                   seed: int | None = None) -> list:
    """Dispatch a validated config and persist CSV outputs plus a manifest."""
    if seed is not None:
        cfg.seed = seed
        cfg.raw.setdefault("noise", {})["seed"] = str(seed)
    replicas = replicas or cfg.replicas
    cfg.raw.setdefault("experiment", {})["replicas"] = str(replicas)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cov = cfg.covariance()
    write_covariance_csv(cov, out_dir / "covariance.csv")

    if cfg.kind == "mean-kernel":
        records = _run_mean_kernel(cfg, cov, out_dir, replicas)
    elif cfg.kind == "second-moment":
        records = _run_second_moment(cfg, cov, out_dir, replicas)
    elif cfg.kind == "critical-line":
        records = _run_q_lambda_table(cfg, cov, out_dir, compare="she")
    elif cfg.kind == "weak-disorder":
        records = _run_q_lambda_table(cfg, cov, out_dir, compare="heat")
    elif cfg.kind == "strong-disorder":
        records = _run_strong_disorder(cfg, cov, out_dir, replicas)
    elif cfg.kind == "phase-sweep":
        records = _run_phase_sweep(cfg, cov, out_dir)
    else:
        raise ValidationError(f"unknown experiment kind {cfg.kind!r}")

    _write_manifest(out_dir, cfg, records)
    return records
