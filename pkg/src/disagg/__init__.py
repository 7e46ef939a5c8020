"""Disaggregation regression: simulate nested geographies and pixel-level
risk surfaces, fit polygon-aggregated Poisson models with a latent Matérn
field, and score the fine-scale predictions."""

from .errors import (
    ConfigurationError,
    DegenerateCovariateError,
    DegeneratePolygonError,
    DisaggError,
    EvaluationError,
    NumericalError,
    SimulationError,
    ThresholdExhaustedError,
)
from .raster import GridSpec, Raster
from .geometry import PolygonPartition, World, is_connected, make_world, polygon_mask, sample_contiguous
from .lattice import NodeLattice, latent_field_at_pixels
from .fields import (
    CovariateStack,
    MaternParams,
    apply_transform,
    make_mock_covariates,
    make_population,
    make_real_covariates,
    matern_cov,
    simulate_grf,
    standardize,
)
from .simulate import (
    AggregatedData,
    ScenarioSpec,
    SimulatedSurface,
    aggregate_cases,
    build_risk_surface,
    draw_coefficients,
    draw_intercept,
    sample_cases,
    simulate_surface,
)
from .model import (
    FitOptions,
    FitResult,
    ModelParams,
    PriorSpec,
    fit_map,
    grad_neg_log_posterior,
    neg_log_posterior,
    pc_prior_logdensity,
    predict_pixels,
)
from .evaluation import CvReport, MetricReport, baseline_predict, kfold_cv, pearson, score
from .experiments import ExperimentConfig, run_experiment1, run_experiment2

__version__ = "0.1.0"
