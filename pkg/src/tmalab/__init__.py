"""Nucleus detection, staining scoring and survival analysis for tissue
microarray spots."""

from .data import (
    CONFIDENCE_LEVELS,
    NUCLEUS_CLASSES,
    STAIN_STATES,
    DataError,
    NucleusAnnotation,
    SpotRecord,
    SurvivalRecord,
    load_annotations,
    load_survival_csv,
    save_annotations,
    save_survival_csv,
)
from .detection import (
    Detection,
    MatchResult,
    MeanShiftConfig,
    ProbabilityMap,
    detect_nuclei,
    match_detections,
    mean_shift_modes,
    probability_map,
    voronoi_negative_samples,
)
from .forest import (
    DetectionForest,
    ForestConfig,
    RelationalFeature,
    eval_feature,
    feature_space_cardinality,
    forest_from_json,
    forest_to_json,
    grid_search_oob,
    integral_image,
    load_forest,
    oob_error,
    predict,
    predict_batch,
    sample_feature,
    save_forest,
    train_forest,
    train_tree,
)
from .images import (
    GrayImage,
    Patch,
    RgbImage,
    extract_patch,
    load_image,
    mirror_pad,
    save_image,
    to_gray,
)
from .online import (
    Correction,
    OnlineParams,
    OnlineSession,
    append_correction_log,
    read_correction_log,
    replay_corrections,
)
from .panel import (
    AgreementReport,
    LabelMatrix,
    agreement_report,
    gold_standard,
    majority_vote,
    staining_dispersion,
)
from .pipeline import (
    ConfigError,
    StudyConfig,
    StudyResult,
    config_from_toml,
    run_study,
)
from .staining import (
    ColorHistogram,
    PatientStaining,
    StainingModel,
    classify_staining,
    fit_staining_model,
    histogram_at,
    patient_staining,
    patient_staining_multi,
)
from .survival import (
    FitOptions,
    KaplanMeierCurve,
    LogRankResult,
    WeibullPhModel,
    chi2_tail_1df,
    expand_interactions,
    fit_weibull_ph,
    kaplan_meier,
    log_likelihood,
    log_rank,
    split_by_staining,
    survival_function,
)

__version__ = "0.1.0"
