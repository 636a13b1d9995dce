"""Infinitesimal gradient boosting: trees, flows, and population analysis."""

from .domain import (
    EmpiricalDistribution,
    EnsembleModel,
    Region,
    SplittingScheme,
    TreeBatch,
    TreeFunction,
    TreeParams,
    as_predictor,
    evaluate_model,
    node_address,
    node_index,
    region_split,
    restricted_moment,
    scheme_to_partition,
    split_threshold,
)
from .errors import (
    BlowupError,
    ConfigError,
    ConvergenceError,
    DataError,
    IgbError,
    LabelError,
)
from .experiments import ExperimentConfig, config_from_mapping, run_experiment
from .flow import (
    FlowParams,
    FlowTrace,
    accumulated_stderr,
    euler_step,
    integrate_flow,
    trajectory_discrepancy,
)
from .generators import GENERATORS, GeneratorSpec, bayes_target, generate_dataset, truth
from .losses import (
    LOSS_KINDS,
    bayes_predictor,
    check_labels,
    initial_constant,
    loss_grad,
    loss_hess,
    loss_value,
)
from .operator import (
    OperatorEstimate,
    estimate_operator,
    operator_discrepancy,
    operator_on_grid,
)
from .population import (
    Beta0OperatorMatrix,
    CornerMeasureEstimate,
    GridFunction,
    RectangleFamily,
    anova_projection,
    beta0_operator_matrix,
    critical_point_residual,
    estimate_pi0,
    gc_sup_discrepancy,
    lattice_points,
    pi0_envelope_fit,
    uniform_product_tail,
)
from .trees import (
    derive_rng,
    leaf_value,
    rn_weight,
    sample_forest,
    sample_gradient_tree,
    sample_tree_batch,
    softmax_probabilities,
    split_score,
)

__version__ = "0.1.0"

__all__ = [
    "BlowupError", "Beta0OperatorMatrix", "ConfigError", "ConvergenceError",
    "CornerMeasureEstimate", "DataError", "EmpiricalDistribution",
    "EnsembleModel", "ExperimentConfig", "FlowParams", "FlowTrace",
    "GENERATORS", "GeneratorSpec", "GridFunction", "IgbError", "LOSS_KINDS",
    "LabelError", "OperatorEstimate", "RectangleFamily", "Region",
    "SplittingScheme", "TreeBatch", "TreeFunction", "TreeParams",
    "accumulated_stderr", "anova_projection", "as_predictor", "bayes_predictor",
    "bayes_target", "beta0_operator_matrix", "check_labels",
    "config_from_mapping", "critical_point_residual", "derive_rng",
    "estimate_operator", "estimate_pi0", "euler_step", "evaluate_model",
    "gc_sup_discrepancy", "generate_dataset", "initial_constant",
    "integrate_flow", "lattice_points", "leaf_value", "loss_grad", "loss_hess",
    "loss_value", "node_address", "node_index", "operator_discrepancy",
    "operator_on_grid", "pi0_envelope_fit", "region_split", "restricted_moment",
    "rn_weight", "run_experiment", "sample_forest", "sample_gradient_tree",
    "sample_tree_batch", "scheme_to_partition", "softmax_probabilities",
    "split_score", "split_threshold", "trajectory_discrepancy", "truth",
    "uniform_product_tail",
]
