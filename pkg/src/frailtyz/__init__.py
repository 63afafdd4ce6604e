"""Shared gamma-frailty Cox models with randomized-survival-probability Z-residual diagnostics."""

from .data import (DataError, ParseError, Schema, SchemaError, SurvivalDataset,
                   SurvivalRecord, load_csv, save_csv, summarize)
from .frailty import (BaselineHazard, Covariate, FitControl, FrailtyFit, ModelSpec,
                      SingularHessianError, breslow_baseline, fit_ppl, marginal_loglik,
                      partial_loglik, penalty_loglik, survival_prob)
from .gof import (ReplicationReport, TestReport, anova_homogeneity, km_chf, ks_test_normal,
                  pmin, replicate_tests, run_test, sf_test, sf_test_censored, sw_test)
from .lowess import lowess
from .residuals import ResidualSet, z_residual
from .simulation import ExperimentGrid, GridResult, SimConfig, generate_dataset, run_grid

__version__ = "0.1.0"
