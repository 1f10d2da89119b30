"""Squared-discrepancy estimators and stochastic fitting of the GLM.

Two gradient estimators are provided. The score-function estimator applies
to any fixed kernel and weights the per-sample score by kernel values. The
model-based estimator differentiates the kernel itself with the drawn
samples held fixed, which is only meaningful jointly with the likelihood
(a model-based discrepancy can be driven to zero by degenerate parameters).
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import glm as _glm
from . import kernels as _kernels
from .errors import (
    ContractError,
    GradientUndefinedError,
    NoQualifyingAlphaError,
    OptimizationError,
    ParameterError,
    RunawayError,
    ShapeError,
)
from .glm import GlmParams, GradVec
from .kernels import KernelSpec, resolve_spec
from .optim import AdamStepper, FitConfig, FitTrace, clip_norm
from .spiketrain import TrialSet

# sampling streams: iteration i of a fit uses stream i + 1; evaluation
# sampling uses streams from this base so the two never collide
EVAL_STREAM_BASE = 1_000_000_000

RATE_BAND = 0.10


@dataclass(frozen=True)
class Mmd2Estimate:
    """A squared-discrepancy estimate with its provenance."""

    value: float
    estimator: str
    n_data: int
    n_model: int

    def __post_init__(self):
        if self.estimator not in ("biased", "unbiased"):
            raise ParameterError(f"unknown estimator {self.estimator!r}")


# ---------------------------------------------------------------------------
# estimators


def mmd2_unbiased(G_dd: np.ndarray, G_mm: np.ndarray,
                  G_dm: np.ndarray) -> Mmd2Estimate:
    """Diagonal-excluding U-statistic estimate from Gram blocks."""
    G_dd = np.asarray(G_dd, dtype=np.float64)
    G_mm = np.asarray(G_mm, dtype=np.float64)
    G_dm = np.asarray(G_dm, dtype=np.float64)
    if G_dd.ndim != 2 or G_dd.shape[0] != G_dd.shape[1]:
        raise ShapeError("G_dd must be square")
    if G_mm.ndim != 2 or G_mm.shape[0] != G_mm.shape[1]:
        raise ShapeError("G_mm must be square")
    n, m = G_dd.shape[0], G_mm.shape[0]
    if G_dm.shape != (n, m):
        raise ShapeError(f"G_dm must be {n}x{m}, got {G_dm.shape}")
    if n < 2 or m < 2:
        raise ParameterError(
            f"the unbiased estimator needs >= 2 samples per side, got ({n}, {m})"
        )
    term_dd = (G_dd.sum() - np.trace(G_dd)) / (n * (n - 1))
    term_mm = (G_mm.sum() - np.trace(G_mm)) / (m * (m - 1))
    term_dm = G_dm.sum() / (n * m)
    return Mmd2Estimate(float(term_dd + term_mm - 2.0 * term_dm), "unbiased", n, m)


def mmd2_biased(F_data: np.ndarray, F_model: np.ndarray) -> Mmd2Estimate:
    """Squared norm of the mean-feature gap; non-negative by construction."""
    F_data = np.atleast_2d(np.asarray(F_data, dtype=np.float64))
    F_model = np.atleast_2d(np.asarray(F_model, dtype=np.float64))
    if F_data.shape[0] < 1 or F_model.shape[0] < 1:
        raise ParameterError("each side needs at least one feature vector")
    if F_data.shape[1] != F_model.shape[1]:
        raise ShapeError(
            f"feature dimensions differ: {F_data.shape[1]} vs {F_model.shape[1]}"
        )
    gap = F_data.mean(axis=0) - F_model.mean(axis=0)
    return Mmd2Estimate(
        float(gap @ gap), "biased", F_data.shape[0], F_model.shape[0]
    )


def mmd2_unbiased_from_features(F_data: np.ndarray,
                                F_model: np.ndarray) -> Mmd2Estimate:
    """U-statistic for a feature-map kernel in time linear in the trials."""
    F_data = np.atleast_2d(np.asarray(F_data, dtype=np.float64))
    F_model = np.atleast_2d(np.asarray(F_model, dtype=np.float64))
    n, m = F_data.shape[0], F_model.shape[0]
    if n < 2 or m < 2:
        raise ParameterError(
            f"the unbiased estimator needs >= 2 samples per side, got ({n}, {m})"
        )
    if F_data.shape[1] != F_model.shape[1]:
        raise ShapeError("feature dimensions differ")
    s_d, s_m = F_data.sum(axis=0), F_model.sum(axis=0)
    q_d = float(np.einsum("ij,ij->", F_data, F_data))
    q_m = float(np.einsum("ij,ij->", F_model, F_model))
    term_dd = (float(s_d @ s_d) - q_d) / (n * (n - 1))
    term_mm = (float(s_m @ s_m) - q_m) / (m * (m - 1))
    term_dm = float(s_d @ s_m) / (n * m)
    return Mmd2Estimate(float(term_dd + term_mm - 2.0 * term_dm), "unbiased", n, m)


def mmd2_between(
    data: TrialSet,
    samples: TrialSet,
    spec: KernelSpec,
    params: GlmParams | None = None,
    estimator: str = "unbiased",
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> Mmd2Estimate:
    """Squared discrepancy between two trial sets under a kernel spec."""
    spec = resolve_spec(spec, data)
    if u is None:
        u = data.stimulus
    if spec.tag == "cumcount-gaussian":
        if estimator == "biased":
            raise ContractError(
                "the biased estimator needs an explicit feature map; "
                "cumcount-gaussian has none"
            )
        g_dd = _kernels.gram(spec, data, data, None, u, lam_max)
        g_mm = _kernels.gram(spec, samples, samples, None, u, lam_max)
        g_dm = _kernels.gram(spec, data, samples, None, u, lam_max)
        return mmd2_unbiased(g_dd, g_mm, g_dm)
    p = params if spec.model_based else None
    f_d = _kernels.feature_matrix(spec, data.counts_matrix(), data.dt, p, u, lam_max)
    f_m = _kernels.feature_matrix(
        spec, samples.counts_matrix(), samples.dt, p, u, lam_max
    )
    if estimator == "biased":
        return mmd2_biased(f_d, f_m)
    return mmd2_unbiased_from_features(f_d, f_m)


# ---------------------------------------------------------------------------
# score-function gradient estimator


class _FixedKernelState:
    """Data-side quantities of a fixed kernel, computed once per fit."""

    def __init__(self, spec: KernelSpec, counts_data: np.ndarray, dt: float):
        self.spec = spec
        self.dt = dt
        self.n = counts_data.shape[0]
        if spec.tag == "cumcount-gaussian":
            self.i_data = np.cumsum(counts_data, axis=1).astype(np.float64)
            self.sq_data = np.einsum("ij,ij->i", self.i_data, self.i_data)
            g_dd = np.exp(
                -_kernels._cumcount_sqdist(counts_data, counts_data, dt)
                / spec.sigma
            )
            self.term_dd = (g_dd.sum() - np.trace(g_dd)) / (self.n * (self.n - 1))
            self.f_data = None
        else:
            self.f_data = _kernels.feature_matrix(spec, counts_data, dt)
            self.s_d = self.f_data.sum(axis=0)
            q_d = float(np.einsum("ij,ij->", self.f_data, self.f_data))
            self.term_dd = (float(self.s_d @ self.s_d) - q_d) / (
                self.n * (self.n - 1)
            )

    def cross_and_model(self, counts_m: np.ndarray):
        """Column sums needed by the gradient, plus the mm/dm estimate terms.

        Returns (w1, w2, term_mm, term_dm) where w1[j] = sum_{i != j}
        k(x'_i, x'_j) and w2[j] = sum_i k(x_i, x'_j).
        """
        m = counts_m.shape[0]
        if self.spec.tag == "cumcount-gaussian":
            i_m = np.cumsum(counts_m, axis=1).astype(np.float64)
            sq_m = np.einsum("ij,ij->i", i_m, i_m)
            d2_mm = np.maximum(
                (sq_m[:, None] + sq_m[None, :] - 2.0 * (i_m @ i_m.T)) * self.dt, 0.0
            )
            g_mm = np.exp(-d2_mm / self.spec.sigma)
            d2_dm = np.maximum(
                (self.sq_data[:, None] + sq_m[None, :] - 2.0 * (self.i_data @ i_m.T))
                * self.dt,
                0.0,
            )
            g_dm = np.exp(-d2_dm / self.spec.sigma)
            w1 = g_mm.sum(axis=0) - np.diag(g_mm)
            w2 = g_dm.sum(axis=0)
            term_mm = w1.sum() / (m * (m - 1))
            term_dm = g_dm.sum() / (self.n * m)
            return w1, w2, term_mm, term_dm
        f_m = _kernels.feature_matrix(self.spec, counts_m, self.dt)
        s_m = f_m.sum(axis=0)
        w1 = f_m @ s_m - np.einsum("ij,ij->i", f_m, f_m)
        w2 = f_m @ self.s_d
        term_mm = w1.sum() / (m * (m - 1))
        term_dm = w2.sum() / (self.n * m)
        return w1, w2, term_mm, term_dm


def _score_step(
    params: GlmParams,
    state: _FixedKernelState,
    counts_m: np.ndarray,
    dt: float,
    obs: str,
    u: np.ndarray | None,
    baseline: bool,
    lam_max: float,
) -> tuple[np.ndarray, int, float]:
    """Gradient vector, exclusion count, and the step's unbiased estimate."""
    m_total = counts_m.shape[0]
    score, clipped = _glm.score_matrix(params, counts_m, dt, obs, u, lam_max)
    n_exc = int(clipped.sum())
    if n_exc * 2 > m_total or m_total - n_exc < 2:
        raise RunawayError(
            f"{n_exc} of {m_total} model samples hit the intensity cap; "
            "the score-function gradient would be dominated by exclusions"
        )
    if n_exc:
        keep = ~clipped
        counts_m = counts_m[keep]
        score = score[keep]
    m = counts_m.shape[0]
    n = state.n
    w1, w2, term_mm, term_dm = state.cross_and_model(counts_m)
    mmd2_val = state.term_dd + term_mm - 2.0 * term_dm
    if baseline:
        # leave-one-out control variate: sample j's kernel weight is
        # centered by the mean over terms not involving j, which is
        # independent of x'_j and so keeps the estimator exactly unbiased
        if m > 2:
            w1 = w1 - (w1.sum() - 2.0 * w1) / (m - 2)
        w2 = w2 - (w2.sum() - w2) / (m - 1)
    grad = (2.0 / (m * (m - 1))) * (score.T @ w1) - (2.0 / (n * m)) * (
        score.T @ w2
    )
    return grad, n_exc, float(mmd2_val)


def mmd2_grad_score(
    params: GlmParams,
    data: TrialSet,
    model_samples: TrialSet,
    spec: KernelSpec,
    obs: str,
    u: np.ndarray | None = None,
    baseline: bool = True,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> tuple[GradVec, int]:
    """Score-function estimate of the squared-discrepancy gradient.

    Model samples whose intensity hit the cap are excluded (the cap is not
    differentiable); the count of exclusions is returned alongside the
    gradient, and more than half excluded raises RunawayError.
    """
    if spec.model_based:
        raise ContractError(
            "the score-function path takes a fixed kernel; "
            f"{spec.tag!r} is model-based"
        )
    spec = resolve_spec(spec, data)
    if u is None:
        u = data.stimulus
    state = _FixedKernelState(spec, data.counts_matrix(), data.dt)
    grad, n_exc, _ = _score_step(
        params, state, model_samples.counts_matrix(), data.dt, obs, u,
        baseline, lam_max,
    )
    return GradVec.from_vector(grad, params.n_history, params.n_stimulus), n_exc


# ---------------------------------------------------------------------------
# model-based gradient (samples held fixed)


def _modelbased_step(
    params: GlmParams,
    spec: KernelSpec,
    counts_data: np.ndarray,
    counts_m: np.ndarray,
    dt: float,
    u: np.ndarray | None,
    lam_max: float,
) -> tuple[np.ndarray, int, float]:
    f_d, j_d, clip_d = _kernels.feature_jacobians(
        spec, params, counts_data, dt, u, lam_max
    )
    if clip_d.any():
        raise GradientUndefinedError(
            "intensity cap engaged on the data side; gradient undefined"
        )
    f_m, j_m, clip_m = _kernels.feature_jacobians(
        spec, params, counts_m, dt, u, lam_max
    )
    m_total = counts_m.shape[0]
    n_exc = int(clip_m.sum())
    if n_exc * 2 > m_total or m_total - n_exc < 2:
        raise RunawayError(
            f"{n_exc} of {m_total} model samples hit the intensity cap"
        )
    if n_exc:
        keep = ~clip_m
        f_m, j_m = f_m[keep], j_m[keep]
    n, m = f_d.shape[0], f_m.shape[0]
    if n < 2:
        raise ParameterError("need >= 2 data trials for the unbiased gradient")
    s_d, s_m = f_d.sum(axis=0), f_m.sum(axis=0)
    # sum_{i != j} grad k_ij = 2 sum_i J_i^T (S - phi_i), within each block
    g_dd = 2.0 * (
        np.einsum("idp,d->p", j_d, s_d) - np.einsum("idp,id->p", j_d, f_d)
    ) / (n * (n - 1))
    g_mm = 2.0 * (
        np.einsum("idp,d->p", j_m, s_m) - np.einsum("idp,id->p", j_m, f_m)
    ) / (m * (m - 1))
    g_dm = (
        np.einsum("idp,d->p", j_d, s_m) + np.einsum("idp,d->p", j_m, s_d)
    ) / (n * m)
    grad = g_dd + g_mm - 2.0 * g_dm
    est = mmd2_unbiased_from_features(f_d, f_m)
    return grad, n_exc, est.value


def mmd2_grad_modelbased(
    params: GlmParams,
    data: TrialSet,
    model_samples: TrialSet,
    spec: KernelSpec,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> tuple[GradVec, int]:
    """Gradient of the unbiased estimate through the kernel's parameter
    dependence, with the drawn samples held fixed.

    The score-function correction terms are deliberately omitted; they
    vanish only in expectation arguments that hold the samples fixed.
    """
    if not spec.model_based:
        raise ContractError(
            f"{spec.tag!r} is a fixed kernel; its parameter gradient is zero"
        )
    spec = resolve_spec(spec, data)
    if u is None:
        u = data.stimulus
    grad, n_exc, _ = _modelbased_step(
        params, spec, data.counts_matrix(), model_samples.counts_matrix(),
        data.dt, u, lam_max,
    )
    return GradVec.from_vector(grad, params.n_history, params.n_stimulus), n_exc


# ---------------------------------------------------------------------------
# stochastic fitting


def _default_mmd_init(data: TrialSet, config: FitConfig) -> GlmParams:
    rate = max(
        data.mean_rate(), 1.0 / (data.n_trials * data.t_bins * data.dt)
    )
    n_a = config.stimulus_bins if data.stimulus is not None else 0
    vec = np.zeros(1 + config.history_bins + n_a)
    vec[0] = math.log(rate)
    return GlmParams.from_vector(vec, config.history_bins, n_a)


def _stochastic_fit(
    data: TrialSet,
    spec: KernelSpec,
    obs: str,
    config: FitConfig,
    init: GlmParams,
    include_nll: bool,
    mmd_weight: float,
) -> tuple[GlmParams, FitTrace]:
    _glm.check_observation_model(obs)
    spec = resolve_spec(spec, data)
    counts_data = data.counts_matrix()
    dt, t_bins = data.dt, data.t_bins
    u = data.stimulus
    n_h, n_a = init.n_history, init.n_stimulus
    theta = init.to_vector()
    stepper = AdamStepper(theta.size, config.learning_rate, eps_rel=0.1)
    trace = FitTrace(
        meta={
            "kernel": spec.tag,
            "sigma": spec.sigma,
            "bandwidth": spec.bandwidth,
            "max_lag": spec.max_lag,
            "alpha": config.alpha if include_nll else None,
            "objective": "nll+alpha*mmd2" if include_nll else "mmd2",
        }
    )
    fixed_state = (
        _FixedKernelState(spec, counts_data, dt) if not spec.model_based else None
    )
    tail: deque[np.ndarray] = deque(maxlen=max(config.tail_average, 1))
    theta_prev = theta.copy()
    lr_scale = 1.0
    t0 = time.perf_counter()
    for it in range(config.max_iters):
        # harmonic step-size decay damps the random walk that stochastic
        # gradients would otherwise sustain along flat objective directions
        stepper.lr = lr_scale * config.learning_rate / (1.0 + config.lr_decay * it)
        params = GlmParams.from_vector(theta, n_h, n_a)
        samples, _ = _glm.sample_free_running(
            params, dt, obs, config.samples_per_step, t_bins, u,
            seed=config.seed, stream=it + 1, lam_max=config.lam_max,
        )
        counts_m = samples.counts_matrix()
        try:
            if fixed_state is not None:
                g_mmd, n_exc, mmd2_val = _score_step(
                    params, fixed_state, counts_m, dt, obs, u,
                    config.baseline, config.lam_max,
                )
            else:
                g_mmd, n_exc, mmd2_val = _modelbased_step(
                    params, spec, counts_data, counts_m, dt, u, config.lam_max
                )
            if include_nll:
                nll_val, g_nll, capped = _glm._nll_mean_and_grad(
                    params, counts_data, dt, obs, u, config.lam_max,
                    config.lambda_ridge,
                )
                if capped:
                    raise GradientUndefinedError(
                        "intensity cap engaged on training data"
                    )
                grad = g_nll + mmd_weight * g_mmd
            else:
                rows = _glm.loglik_rows(
                    params, counts_data, dt, obs, u, config.lam_max
                )
                nll_val = -float(rows.mean())
                grad = mmd_weight * g_mmd
            if not np.all(np.isfinite(grad)):
                raise OptimizationError("non-finite gradient", last_params=params)
        except (GradientUndefinedError, OptimizationError) as err:
            if isinstance(err, RunawayError):
                err.trace = trace
                err.last_params = params
                raise
            # step back onto the last good iterate and shrink
            theta = theta_prev.copy()
            lr_scale *= 0.5
            stepper.reset()
            if lr_scale < 1e-12:
                raise OptimizationError(
                    "step size collapsed while avoiding undefined gradients",
                    last_params=GlmParams.from_vector(theta, n_h, n_a),
                    trace=trace,
                ) from err
            continue
        grad_norm = float(np.linalg.norm(grad))
        grad = clip_norm(grad, config.grad_clip)
        snapshot = (
            params if config.trace_stride and it % config.trace_stride == 0 else None
        )
        trace.append(it, nll_val, mmd2_val, grad_norm, n_exc,
                     (time.perf_counter() - t0) * 1e3, snapshot)
        t0 = time.perf_counter()
        theta_prev = theta.copy()
        theta = theta - stepper.step(grad)
        tail.append(theta.copy())
    if config.tail_average > 0 and tail:
        theta = np.mean(np.stack(tail), axis=0)
    return GlmParams.from_vector(theta, n_h, n_a), trace


def fit_mmd(
    data: TrialSet,
    spec: KernelSpec,
    obs: str,
    config: FitConfig,
    init: GlmParams | None = None,
) -> tuple[GlmParams, FitTrace]:
    """Fit by minimizing the squared discrepancy alone (fixed kernels only)."""
    if spec.model_based:
        raise ContractError(
            "a model-based kernel cannot be the sole objective; "
            "optimize it jointly with the likelihood"
        )
    if init is None:
        init = _default_mmd_init(data, config)
    return _stochastic_fit(data, spec, obs, config, init,
                           include_nll=False, mmd_weight=1.0)


def fit_joint(
    data: TrialSet,
    spec: KernelSpec,
    obs: str,
    config: FitConfig,
    init: GlmParams | None = None,
) -> tuple[GlmParams, FitTrace]:
    """Minimize mean NLL plus alpha times the squared discrepancy.

    Defaults to initializing at the maximum-likelihood estimate.
    """
    if init is None:
        mle_config = config.with_(max_iters=max(config.max_iters, 2000))
        init, _ = _glm.fit_mle(data, obs, mle_config)
    return _stochastic_fit(data, spec, obs, config, init,
                           include_nll=True, mmd_weight=config.alpha)


# ---------------------------------------------------------------------------
# alpha selection


@dataclass
class AlphaScanRow:
    alpha: float
    final_nll: float | None
    final_mmd2: float | None
    sample_rate_hz: float
    rate_ok: bool
    runaway_frac: float
    params: GlmParams = field(repr=False, default=None)
    trace: FitTrace = field(repr=False, default=None)


@dataclass
class AlphaScanReport:
    rows: list[AlphaScanRow]
    data_rate_hz: float
    selected_alpha: float | None


def _runaway_fraction(samples: TrialSet, data: TrialSet) -> float:
    data_means = data.counts_matrix().sum(axis=1) / (data.t_bins * data.dt)
    threshold = 3.0 * float(data_means.max())
    sample_means = samples.counts_matrix().sum(axis=1) / (
        samples.t_bins * samples.dt
    )
    return float(np.mean(sample_means > threshold))


def select_alpha(
    data: TrialSet,
    spec: KernelSpec,
    obs: str,
    grid,
    config: FitConfig,
    init: GlmParams | None = None,
) -> tuple[float, AlphaScanReport]:
    """Scan an ascending alpha grid; pick the smallest rate-matching value.

    A value qualifies when the mean rate of its evaluation samples lies
    within 10 percent of the data's mean rate. Raises when nothing
    qualifies, carrying the full report on the exception.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ParameterError("alpha grid must be non-empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("alpha grid must be strictly ascending")
    if any(a < 0 for a in grid):
        raise ParameterError("alpha values must be >= 0")
    spec = resolve_spec(spec, data)
    if init is None:
        mle_config = config.with_(max_iters=max(config.max_iters, 2000))
        init, _ = _glm.fit_mle(data, obs, mle_config)
    data_rate = data.mean_rate()
    rows: list[AlphaScanRow] = []
    for idx, alpha in enumerate(grid):
        params_a, trace_a = fit_joint(
            data, spec, obs, config.with_(alpha=alpha), init=init
        )
        samples, _ = _glm.sample_free_running(
            params_a, data.dt, obs, config.eval_samples, data.t_bins,
            data.stimulus, seed=config.seed, stream=EVAL_STREAM_BASE + idx,
            lam_max=config.lam_max,
        )
        rate = samples.mean_rate()
        rows.append(
            AlphaScanRow(
                alpha=alpha,
                final_nll=trace_a.final_nll(),
                final_mmd2=trace_a.final_mmd2(),
                sample_rate_hz=rate,
                rate_ok=abs(rate - data_rate) <= RATE_BAND * data_rate,
                runaway_frac=_runaway_fraction(samples, data),
                params=params_a,
                trace=trace_a,
            )
        )
    selected = next((r.alpha for r in rows if r.rate_ok), None)
    report = AlphaScanReport(rows=rows, data_rate_hz=data_rate,
                             selected_alpha=selected)
    if selected is None:
        raise NoQualifyingAlphaError(
            f"no alpha in {grid} brought the sample rate within "
            f"{RATE_BAND:.0%} of the data rate {data_rate:.3f} Hz",
            report=report,
        )
    return selected, report
