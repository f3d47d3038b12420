"""Heterogeneous treatment effects of crop diversification on gridded data.

The package covers the full pipeline: geospatial feature engineering
(parcel clipping, crop abundance, diversification treatment), native
tree-ensemble learners with numba-accelerated kernels, a cross-fitted
double machine learning estimator with robust inference, a decision-tree
interpreter for the fitted effects, synthetic-data generators with a
Monte Carlo harness, and a deterministic command-line interface.
"""

from .causal import (
    AteSummary,
    DiagnosticRow,
    DmlResult,
    EffectEstimate,
    EstimatorConfig,
    FirstStageDiagnostic,
    LinearCateModel,
    RawCoefficients,
    ResidualSet,
    TrimReport,
    Z95,
    ate,
    cate,
    cate_batch,
    cross_fit_residuals,
    estimate_propensity,
    first_stage_diagnostic,
    fit_linear_cate,
    raw_coefficients,
    run_dml,
    trim_overlap,
)
from .config import RunConfig, config_dict, load_config, parse_theta
from .core import (
    CANONICAL_COLUMNS,
    AggregationReport,
    FeatureMatrix,
    LabeledDataset,
    Scaler,
    derive_seed,
    median_binarize,
    standardize,
    temporal_aggregate,
)
from .errors import (
    CropCateError,
    GeometryError,
    NoOverlapError,
    RankDeficientError,
    SchemaError,
    SingleClassError,
    ValidationError,
)
from .geo import (
    AbundanceTable,
    AssembledData,
    EnvTable,
    GridSpec,
    JoinReport,
    OutcomeTable,
    ParcelRecord,
    agricultural_mask,
    assemble_dataset,
    clip_polygon_to_cell,
    compute_abundance,
    diversification_count,
    format_wkt_polygon,
    parse_wkt_polygon,
    shoelace_area,
)
from .interpret import (
    EffectCurve,
    InterpreterTree,
    LeafStats,
    default_min_leaf,
    effect_curve,
    fit_interpreter,
    parse_rendered_tree,
    render_tree,
    to_nested,
)
from .learners import (
    BoostedModel,
    BoostParams,
    CvResult,
    ForestModel,
    ForestParams,
    LearnerSpec,
    Tree,
    TreeNode,
    cross_validate,
    default_max_features,
    f1_score,
    fit_gradient_boosted_classifier,
    fit_random_forest,
    fit_tree,
    kfold_indices,
    load_model,
    model_from_dict,
    model_to_dict,
    r2_score,
    save_model,
)
from .synth import (
    ConstantTheta,
    DgpSpec,
    F_FORMS,
    G_FORMS,
    LinearTheta,
    McReport,
    NamedTheta,
    RepResult,
    SynthData,
    generate,
    monte_carlo,
    theta_label,
)

__version__ = "0.1.0"
