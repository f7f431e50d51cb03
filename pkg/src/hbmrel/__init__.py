"""Hierarchical Bayesian model updating and reliability analysis.

Two worked problem families: an analytically tractable linear map with
Gaussian noise, and a shear-chain structural model identified from noisy
acceleration records via two-stage sampling. Both feed reliability updates
that average conditional failure probabilities over the hyper posterior.
"""

__version__ = "0.1.0"

from .gaussian import (
    GaussianNd,
    HyperParams,
    SampleSet,
    convolve_marginal,
    logpdf,
    sample,
    std_normal_cdf,
    std_normal_quantile,
)
from .samplers import (
    BoxPrior,
    TargetDensity,
    TmcmcConfig,
    modified_metropolis_step,
    split_stream,
    tmcmc,
)
from .linear import (
    GaussianSummary,
    LinearLimitState,
    LinearModel,
    LinearSuite,
    cbm_posterior,
    default_hyper_prior,
    default_threshold_grid,
    failure_curve_from_summary,
    failure_probability_linear,
    generate_linear_datasets,
    hyper_log_posterior,
    reduce_dataset,
    reduce_datasets,
    reliability_index,
    sample_hyper_posterior,
)
from .dynamics import (
    Dataset,
    Excitation,
    ResponseHistory,
    ShearChainModel,
    damping_matrix,
    generate_datasets,
    integrate,
    modal_analysis,
    newmark_response,
)
from .two_stage import (
    DynamicHyperParams,
    DynamicParams,
    StageOneResult,
    cbm_dynamic,
    default_cbm_prior,
    default_dynamic_hyper_prior,
    default_stage1_prior,
    hyper_log_posterior_mc,
    log_likelihood_dynamic,
    stage_one,
    stage_two,
    verify_stage_one,
)
from .reliability import (
    DisplacementLimitState,
    ReliabilityCurve,
    SubsetSimConfig,
    SubsetSimResult,
    ThetaPushforward,
    UncertainInput,
    crude_mc_max_displacement,
    default_displacement_grid,
    failure_prob_cbm,
    failure_prob_full_hyper,
    failure_prob_mean_hyper,
    predictive_max_displacement,
    subset_simulation,
)
