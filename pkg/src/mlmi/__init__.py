"""Multiple imputation for two-level data with missing continuous and
binary variables: joint-model and chained-equations engines, ad-hoc
baselines, Rubin's-rules pooling and a simulation benchmark harness."""

__version__ = "1.0.0"

from .data import Dataset, ImputedSet, load_dataset, missingness_pattern, \
    write_dataset, write_imputed
from .fcs import FcsPlan, fcs_impute
from .jm import JmHyper, jm_impute
from .pooling import evaluate_replications, fit_analysis_model, rubin_pool
from .rng import RngStream
from .simulate import GenConfig, MissingnessConfig, RunConfig, \
    generate_complete, impose_missingness, run_configuration

__all__ = [
    "Dataset", "ImputedSet", "load_dataset", "missingness_pattern",
    "write_dataset", "write_imputed",
    "FcsPlan", "fcs_impute",
    "JmHyper", "jm_impute",
    "evaluate_replications", "fit_analysis_model", "rubin_pool",
    "RngStream",
    "GenConfig", "MissingnessConfig", "RunConfig",
    "generate_complete", "impose_missingness", "run_configuration",
    "__version__",
]
