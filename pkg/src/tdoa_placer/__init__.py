"""UWB TDOA anchor placement with a bias-aware MSE bound."""

from .design import DesignConfig, DesignResult, Unsatisfiable, design_system
from .geometry import (
    Boundary,
    Box,
    ExplicitSet,
    FreeSpace,
    GeometryError,
    LinkStatus,
    Material,
    NoFeasibleStart,
    Obstacle,
    PairCondition,
    Placement,
    Scene,
    classify_link,
    classify_pair,
    grid_sample_roi,
    validate_placement,
)
from .io import InputError, fixture_path, list_fixtures, load_placement, load_scene
from .metric import (
    Evaluator,
    PlacementScore,
    PointMetrics,
    SingularGeometry,
    average_rmse,
    bias,
    bias_gradient,
    fim,
    ideal_tdoa,
    mse_lower_bound,
    tdoa_jacobian_row,
)
from .noise import ErrorModel, LogNormalParams, NoiseParams, compose_model, gaussian_approx_lognormal, model_catalog, sample_error
from .optimizer import BcmConfig, BcmTrace, bcm_optimize, optimize_block, random_placement
from .simulator import (
    Diverged,
    GridSearch,
    SimConfig,
    SimReport,
    TooFewMeasurements,
    TruthPerturbed,
    multilaterate,
    sample_measurements,
    simulate,
    simulate_point,
)

__version__ = "0.1.0"
