"""ATT estimation when treatment assignment depends on the untreated outcome.

Identification comes from shadow covariates: variables excluded from the
treatment model but predictive of the untreated outcome.  The package
provides the parametric treatment model, pluggable conditional-mean
nuisances, the efficient score and influence functions, four ATT
estimators with analytic and resampling inference, K-fold cross-fitting,
and a Monte Carlo study harness.
"""

from .data import Dataset, Observation, ValidationReport, load_dataset, save_dataset, standardize, validate
from .estimators import (EstimateReport, SolverOptions, VarianceBlocks, WaldTest,
                         delta_alt, delta_eff, delta_nv1, delta_nv2, estimate_all,
                         solve_theta_eff, solve_theta_with_g, variance_blocks,
                         wald_theta2)
from .crossfit import FoldPlan, crossfit_estimate, make_folds
from .inference import PerturbationConfig, PerturbationResult, coverage_eval, make_pipeline, perturb_se
from .moments import DerivedMoments, compute_moments
from .nuisance import NuisancePair, fit_knn, fit_logistic, fit_pair, predict
from .propensity import expit, pi, pi_gradient
from .scores import ScoreContext, make_context, phi, phi_alt, phi_eff, phi_projection_residual, s_eff
from .simulation import DgpSpec, SimSummary, generate, run_study, true_att, true_att_quadrature

__version__ = "0.1.0"
