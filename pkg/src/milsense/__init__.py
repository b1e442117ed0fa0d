"""Sensor-network design for spatiotemporal fields.

Treats candidate sensor locations as the inducing points of a sparse
variational Gauss-Markov model and selects them by maximizing the
collapsed evidence bound on simulation data. Ships the supporting
pieces: kernel algebra with exact state-space forms, Kalman smoothing,
static and spatiotemporal sparse GPs, design strategies, evaluation
metrics, dataset handling, and a command-line interface.
"""

from .errors import (
    InputError,
    MilsenseError,
    NumericalError,
    OptimizationError,
    ParseError,
    UnsupportedKernelError,
)
from .kernels import (
    Kernel,
    LtiSde,
    Matern12,
    Matern32,
    Matern52,
    Product,
    QuasiPeriodicMatern32,
    Separable,
    Sum,
    eval_kernel,
    kernel_from_dict,
    kernel_matrix,
    kernel_to_dict,
    to_state_space,
)
from .markov_gp import (
    FilterResult,
    SmootherResult,
    StateSpaceModel,
    kalman_filter,
    rts_smoother,
    sample_prior,
)
from .sparse_vgp import (
    InducingSet,
    VariationalMoments,
    collapsed_elbo,
    elbo_perturbation,
    nystrom,
    optimal_q,
    predict,
)
from .stsvgp import (
    FitResult,
    PredictiveField,
    StGpModel,
    StPosterior,
    build_inducing_chain,
    st_elbo,
    st_fit_posterior,
    st_predict,
    test_time_update,
)
from .datasets import (
    BoxTransform,
    DomainHull,
    GridConfig,
    GridDataset,
    convex_hull,
    hull_project,
    inject_sim_error,
    load_grid,
    save_grid,
    synth_field,
)
from .design import (
    OptimizerConfig,
    SensorDesign,
    design_from_dict,
    gaussian_eig,
    imse_design,
    lhs_design,
    load_design,
    mes_design,
    mil_design,
    sensor_removal,
    uniform_design,
    utility,
)
from .evalsuite import (
    DesignMatch,
    EvalReport,
    calibration,
    design_distance,
    evaluate_predictions,
    extreme_error_rate,
    npll,
    rmse,
)

__version__ = "0.1.0"
