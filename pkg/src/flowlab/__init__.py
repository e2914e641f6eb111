"""Desk-scale stochastic numerics for a Brownian particle advected by a
mollified Gaussian velocity field: transport and tilted-transport solvers,
the stochastic heat equation, two-point Monte Carlo, and the deterministic
separation-density machinery that cross-validates them."""

__version__ = "0.1.0"

from .covariance import (CovarianceSpec, MollifierSpec, ScaleParams, a_eps,
                         build_covariance, kappa2_weak_diff, kappa2_weak_env,
                         scale_params, scaled_covariance)
from .noise import (FieldIncrement, FieldSource, NoiseGrid, coupled_family,
                    mollify, sample_white_increments, white_block)
from .spde import (EnsembleStats, GridField, SpdeScheme, heat_field,
                   heat_kernel, init_delta, inner_products,
                   run_she_ensemble, run_transport_ensemble, step_she,
                   step_transport, tilt_kernel)
from .qpde import (AronsonFit, QSolution, aronson_check, duhamel_iterate,
                   she_mass_second_moment, she_second_moment, smoothing_error,
                   solve_q, solve_q_lambda)
from .particles import (DifferenceState, FlowEnsemble, LocalTimeEstimate,
                        MonteCarloEstimate, TwoPointPath, brownian_local_time,
                        empirical_kernel, fk_density_at_zero, fk_moment,
                        local_time, new_difference, new_flow_ensemble,
                        new_two_point, run_flow, she_limit_oracle,
                        step_difference, step_flow, step_two_point)
from .regimes import (RegimePoint, classify_regime, critical_beta, schedule,
                      theorem_hypothesis_flags)
from .config import ExperimentConfig, load_config, parse_config
