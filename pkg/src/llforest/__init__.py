"""Local linear forests: honest random forests used as adaptive kernels for local ridge regression."""

from .causal import (CausalModel, NuisanceEstimates, estimate_nuisances, fit_cf, fit_llcf, predict_tau,
                     transformed_outcome_error)
from .dataset import Dataset, SeededRng, draw_disjoint_subsamples, load_csv, write_csv
from .errors import (ConfigError, DimensionError, LLFError, NoNeighborsError, OverlapError, ParseError,
                     RankError, SchemaError, SizeError)
from .forest import (Forest, ForestConfig, Split, SplitRule, Tree, best_cart_split, best_residual_split,
                     grow_forest)
from .locallinear import (LocalDesign, LocalFit, build_design, modulated_weights, predict, predict_batch,
                          solve_local_ridge)
from .model import RegressionModel, fit_llf, fit_rf, load_model, save_model
from .simbench import (Design, SimSpec, TheoryParams, beta_min_llf, beta_rf, generate, run_causal_benchmark,
                       run_coverage_benchmark, run_rmse_benchmark, theoretical_lambda)
from .tuning import TuningGrid, cross_validate, r_learner_error, select_features_lasso, tune_lambda_oob
from .variance import VarianceEstimate, confidence_interval, little_bags_variance, score_residuals
from .weights import WeightVector, forest_weights, kernel_batch

__version__ = "0.1.0"
