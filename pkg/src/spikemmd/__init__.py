"""Spike-train GLM fitting by likelihood and kernel discrepancy objectives."""

from .errors import (
    ContractError,
    DomainError,
    GradientUndefinedError,
    InsufficientDataError,
    NoQualifyingAlphaError,
    OptimizationError,
    ParameterError,
    ParseError,
    RangeError,
    RunawayError,
    ShapeError,
    SpikeMmdError,
)
from .glm import (
    GlmParams,
    GradVec,
    IntensitySeries,
    conditional_intensity,
    fit_mle,
    load_params,
    log_likelihood,
    nll_gradient,
    relative_ll_per_spike,
    sample_free_running,
    save_params,
    score_function,
)
from .gof import (
    GofReport,
    autocorr_rmse,
    build_report,
    runaway_probability,
    time_rescale_ks,
)
from .kernels import (
    KernelSpec,
    cumcount_kernel,
    feature_autocorr,
    feature_smoothed,
    gram,
    history_autocorr_kernel,
    history_term,
    kernel_grad_theta,
    mean_ci_kernel,
    mean_history_feature,
    resolve_spec,
)
from .mmd import (
    Mmd2Estimate,
    fit_joint,
    fit_mmd,
    mmd2_biased,
    mmd2_grad_modelbased,
    mmd2_grad_score,
    mmd2_between,
    mmd2_unbiased,
    select_alpha,
)
from .optim import FitConfig, FitTrace
from .spiketrain import (
    FeatureSeries,
    SpikeTrain,
    TrialSet,
    autocorrelation,
    cumulative_count,
    firing_rate,
    isi_stats,
    load_trials,
    save_trials,
    smooth,
)

__version__ = "0.1.0"
