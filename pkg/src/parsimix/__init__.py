"""Linear mixed models for crossed random effects: Cholesky-parameterized
REML/ML fitting, random-effects PCA rank diagnostics, and an automated
reduction workflow from maximal to parsimonious models."""

__version__ = "0.1.0"

from .covparam import (
    CovarianceSummary,
    count_params,
    cov_to_sd_cor,
    lambda_to_cov,
    lambda_to_theta,
    max_params_for_design,
    theta_to_lambda,
    total_cov_params,
)
from .data import DataError, Dataset, Factor, from_columns, ingest_csv
from .design import (
    ContrastScheme,
    DesignError,
    ModelMatrices,
    build_model_matrices,
    contrast_columns,
)
from .fitter import (
    FitError,
    FitResult,
    default_budget,
    fit_formula,
    optimize,
    profiled_deviance,
    refit,
)
from .formula import (
    Formula,
    FormulaError,
    RandomTerm,
    Term,
    format_formula,
    parse_formula,
    zcp_transform,
)
from .inference import (
    FixedEffectRow,
    InferenceError,
    LRTResult,
    chisq_p_value,
    fixed_effects_table,
    information_criteria,
    is_nested,
    lr_test,
)
from .repca import FactorPCA, RePCAResult, effective_dimensionality, re_pca
from .selection import (
    SelectionConfig,
    SelectionTrace,
    TraceStep,
    drop_components,
    maximal_formula,
    run_workflow,
    vectorize_random_effects,
)
from .simulate import (
    DesignSpec,
    FactorSpec,
    OneWayEstimates,
    RandomTruth,
    SimulationError,
    TruthSpec,
    closed_form_one_way,
    simulate_lmm,
    truth_spec_from_dict,
    truth_spec_to_dict,
    write_dataset_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
