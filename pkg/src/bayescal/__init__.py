"""Bayesian post-hoc confidence calibration for object detectors."""

from .calibrators import (
    CalibratorSpec,
    FeatureVector,
    HistogramBinningModel,
    Method,
    ParametricModel,
    WeightVector,
    build_features,
    feature_matrix,
    fit_histogram_binning,
    forward,
    load_model,
    nll,
    nll_gradient,
    predict_histogram_binning,
    save_model,
)
from .data import (
    DetectionRecord,
    FeatureSubset,
    GroundTruthBox,
    MatchedSample,
    SampleSet,
    iou,
    load_samples,
    match_detections,
    save_samples,
    split_train_test,
)
from .inference import (
    MlConfig,
    PriorSpec,
    SviConfig,
    VariationalPosterior,
    elbo_estimate,
    fit_ml,
    fit_svi,
    kl_gaussians,
    sample_weights,
)
from .metrics import (
    BinningScheme,
    BinStats,
    EvaluationReport,
    assign_bins,
    d_ece,
    estimate_precision_per_sample,
    mpiw,
    picp,
    reliability_table,
    shift_report,
)
from .uncertainty import (
    PredictionInterval,
    PredictiveDistribution,
    hdi,
    interval_width,
    mean_estimate,
    predict_distribution,
    predict_intervals,
)

__version__ = "0.1.0"
