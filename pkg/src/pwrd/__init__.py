"""Power-weighted aggregation of group effects from repeated measurement trials."""

__version__ = "0.1.0"

from .covariance import (
    CovarianceEstimate,
    cluster_covariance,
    pooled_difference_variance,
    satterthwaite_df,
)
from .effects import (
    ExitEstimate,
    GroupEffects,
    TestInProportions,
    estimate_effects_diffmeans,
    estimate_effects_peters_belson,
    estimate_p0,
    exit_observation_estimate,
)
from .errors import DegenerateDataError, InputError, NumericalError, PwrdError
from .mixed import MixedModelFit, VarianceComponents, fit_random_intercept
from .panel import (
    GroupInfo,
    PanelDataset,
    PanelSchema,
    ThresholdRule,
    derive_groups,
    ingest_panel,
    persist_flags,
)
from .simulate import (
    CohortSpec,
    EffectSpec,
    PowerCell,
    PowerResult,
    Scenario,
    analyze_replicate,
    apply_effect,
    calibrate_thresholds,
    default_scenario,
    estimate_power,
    expected_group_testin,
    expected_testin_profile,
    generate_panel,
    icc_sweep,
    negative_effect_sweep,
    single_track_scenario,
    spillover_scenario,
    theoretical_covariance,
)
from .weights import (
    AggregatedTest,
    AggregationWeights,
    aggregate_external,
    aggregate_test,
    flat_weights,
    pitman_relative_efficiency,
    pwrd_weights,
    test_slope,
)

__all__ = [
    "AggregatedTest",
    "AggregationWeights",
    "CohortSpec",
    "CovarianceEstimate",
    "DegenerateDataError",
    "EffectSpec",
    "ExitEstimate",
    "GroupEffects",
    "GroupInfo",
    "InputError",
    "MixedModelFit",
    "NumericalError",
    "PanelDataset",
    "PanelSchema",
    "PowerCell",
    "PowerResult",
    "PwrdError",
    "Scenario",
    "TestInProportions",
    "ThresholdRule",
    "VarianceComponents",
    "aggregate_external",
    "aggregate_test",
    "analyze_replicate",
    "apply_effect",
    "calibrate_thresholds",
    "cluster_covariance",
    "default_scenario",
    "derive_groups",
    "estimate_effects_diffmeans",
    "estimate_effects_peters_belson",
    "estimate_p0",
    "estimate_power",
    "exit_observation_estimate",
    "expected_group_testin",
    "expected_testin_profile",
    "fit_random_intercept",
    "flat_weights",
    "generate_panel",
    "icc_sweep",
    "ingest_panel",
    "negative_effect_sweep",
    "persist_flags",
    "pitman_relative_efficiency",
    "pooled_difference_variance",
    "pwrd_weights",
    "satterthwaite_df",
    "single_track_scenario",
    "spillover_scenario",
    "test_slope",
    "theoretical_covariance",
]
