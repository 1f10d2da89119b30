"""Autoregressive point-process GLM.

The conditional intensity is an exponential link over a bias, a history
filter on the train's own past, and an optional stimulus filter:

    lam_t = exp(b + sum_tau h_tau * x[t - tau] + sum_tau a_tau * u[t - tau])

with lam in Hz and lam*dt the per-bin event mean. Lags reaching before the
first bin contribute zero. An intensity cap lam_max bounds the exponent so
runaway self-excitation cannot overflow; analytic gradients refuse capped
inputs instead of silently subgradient-ing through the cap.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson as _poisson

from .errors import (
    DomainError,
    GradientUndefinedError,
    InsufficientDataError,
    OptimizationError,
    ParameterError,
    ParseError,
    ShapeError,
)
from .optim import AdamStepper, FitConfig, FitTrace
from .spiketrain import SpikeTrain, TrialSet, _freeze

DEFAULT_LAM_MAX = 1e6

OBSERVATION_MODELS = ("poisson", "bernoulli")


def check_observation_model(obs: str) -> str:
    if obs not in OBSERVATION_MODELS:
        raise ParameterError(
            f"unknown observation model {obs!r}, expected one of {OBSERVATION_MODELS}"
        )
    return obs


@dataclass(frozen=True)
class GlmParams:
    """Model parameters: bias (log-rate units) and per-bin-lag filters."""

    bias: float
    history: np.ndarray
    stimulus_filter: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "bias", float(self.bias))
        hist = np.asarray(self.history, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "history", _freeze(hist.copy()))
        if self.stimulus_filter is not None:
            stim = np.asarray(self.stimulus_filter, dtype=np.float64).reshape(-1)
            object.__setattr__(self, "stimulus_filter", _freeze(stim.copy()))
        if not math.isfinite(self.bias):
            raise ParameterError("bias must be finite")
        if not np.all(np.isfinite(self.history)):
            raise ParameterError("history filter must be finite")
        if self.stimulus_filter is not None and not np.all(
            np.isfinite(self.stimulus_filter)
        ):
            raise ParameterError("stimulus filter must be finite")

    @property
    def n_history(self) -> int:
        return int(self.history.size)

    @property
    def n_stimulus(self) -> int:
        return 0 if self.stimulus_filter is None else int(self.stimulus_filter.size)

    @property
    def n_params(self) -> int:
        return 1 + self.n_history + self.n_stimulus

    def to_vector(self) -> np.ndarray:
        parts = [np.array([self.bias]), self.history]
        if self.stimulus_filter is not None:
            parts.append(self.stimulus_filter)
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_history: int,
                    n_stimulus: int = 0) -> "GlmParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != 1 + n_history + n_stimulus:
            raise ShapeError(
                f"parameter vector of length {vec.size} cannot hold "
                f"1 + {n_history} + {n_stimulus} entries"
            )
        stim = vec[1 + n_history:] if n_stimulus else None
        return cls(vec[0], vec[1 : 1 + n_history], stim)


@dataclass(frozen=True)
class IntensitySeries:
    """Conditional intensity per bin (Hz); clipped marks a bound cap."""

    lam: np.ndarray
    clipped: bool

    def __post_init__(self):
        object.__setattr__(
            self, "lam", _freeze(np.asarray(self.lam, dtype=np.float64))
        )
        object.__setattr__(self, "clipped", bool(self.clipped))


@dataclass(frozen=True)
class GradVec:
    """Gradient with respect to (bias, history, stimulus filter)."""

    d_bias: float
    d_history: np.ndarray
    d_stimulus: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "d_bias", float(self.d_bias))
        object.__setattr__(
            self, "d_history",
            _freeze(np.asarray(self.d_history, dtype=np.float64).reshape(-1)),
        )
        if self.d_stimulus is not None:
            object.__setattr__(
                self, "d_stimulus",
                _freeze(np.asarray(self.d_stimulus, dtype=np.float64).reshape(-1)),
            )

    def to_vector(self) -> np.ndarray:
        parts = [np.array([self.d_bias]), self.d_history]
        if self.d_stimulus is not None:
            parts.append(self.d_stimulus)
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_history: int,
                    n_stimulus: int = 0) -> "GradVec":
        vec = np.asarray(vec, dtype=np.float64)
        stim = vec[1 + n_history:] if n_stimulus else None
        return cls(vec[0], vec[1 : 1 + n_history], stim)

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.to_vector())))


# ---------------------------------------------------------------------------
# intensity


def lagged_filter_output(coeffs: np.ndarray, series: np.ndarray) -> np.ndarray:
    """Rows of H[t] = sum_{tau>=1} coeffs[tau-1] * series[t-tau], zero-padded past.

    series may be (t,) or (n, t); the output matches its shape.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    arr = np.asarray(series, dtype=np.float64)
    squeeze = arr.ndim == 1
    mat = np.atleast_2d(arr)
    t = mat.shape[1]
    out = np.zeros_like(mat)
    for tau in range(1, min(coeffs.size, t - 1) + 1):
        out[:, tau:] += coeffs[tau - 1] * mat[:, : t - tau]
    return out[0] if squeeze else out


def _eta_matrix(params: GlmParams, counts: np.ndarray,
                u: np.ndarray | None) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    eta = np.full(mat.shape, params.bias, dtype=np.float64)
    if params.n_history:
        eta += lagged_filter_output(params.history, mat)
    if params.stimulus_filter is not None and params.stimulus_filter.size:
        if u is None:
            raise ShapeError("params carry a stimulus filter but no stimulus given")
        u = np.asarray(u, dtype=np.float64)
        if u.size != mat.shape[1]:
            raise ShapeError(
                f"stimulus length {u.size} does not match {mat.shape[1]} bins"
            )
        eta += lagged_filter_output(params.stimulus_filter, u)[np.newaxis, :]
    return eta


def intensity_matrix(
    params: GlmParams,
    counts: np.ndarray,
    u: np.ndarray | None = None,
    lam_max: float = DEFAULT_LAM_MAX,
) -> tuple[np.ndarray, np.ndarray]:
    """Intensity rows (Hz) and a per-row flag marking capped bins."""
    eta = _eta_matrix(params, counts, u)
    cap = math.log(lam_max)
    clipped = (eta > cap).any(axis=1)
    lam = np.exp(np.minimum(eta, cap))
    return lam, clipped


def conditional_intensity(
    params: GlmParams,
    x: SpikeTrain,
    u: np.ndarray | None = None,
    lam_max: float = DEFAULT_LAM_MAX,
) -> IntensitySeries:
    """Intensity series for one train conditioned on its own past."""
    lam, clipped = intensity_matrix(params, x.counts, u, lam_max)
    return IntensitySeries(lam[0], bool(clipped[0]))


# ---------------------------------------------------------------------------
# likelihood


def _require_binary(counts: np.ndarray) -> None:
    if counts.max(initial=0) > 1:
        raise DomainError(
            "Bernoulli mode requires binary counts; found a bin with count > 1"
        )


def loglik_rows(
    params: GlmParams,
    counts: np.ndarray,
    dt: float,
    obs: str,
    u: np.ndarray | None = None,
    lam_max: float = DEFAULT_LAM_MAX,
) -> np.ndarray:
    """Log-likelihood of each row of a (n, t) count matrix."""
    check_observation_model(obs)
    mat = np.atleast_2d(np.asarray(counts))
    lam, _ = intensity_matrix(params, mat, u, lam_max)
    mu = lam * dt
    x = mat.astype(np.float64)
    if obs == "poisson":
        with np.errstate(divide="ignore", invalid="ignore"):
            spike_term = np.where(x > 0, x * np.log(mu), 0.0)
        return (spike_term - mu - gammaln(x + 1.0)).sum(axis=1)
    _require_binary(mat)
    p = -np.expm1(-mu)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    return (np.where(x > 0, logp, 0.0) - (1.0 - x) * mu).sum(axis=1)


def log_likelihood(
    params: GlmParams,
    x: SpikeTrain,
    u: np.ndarray | None = None,
    obs: str = "poisson",
    lam_max: float = DEFAULT_LAM_MAX,
) -> float:
    """Data-conditioned log-likelihood of one train, in nats."""
    return float(loglik_rows(params, x.counts, x.dt, obs, u, lam_max)[0])


def log_likelihood_total(
    params: GlmParams,
    trials: TrialSet,
    obs: str,
    lam_max: float = DEFAULT_LAM_MAX,
) -> float:
    """Summed log-likelihood over all trials of a set."""
    rows = loglik_rows(
        params, trials.counts_matrix(), trials.dt, obs, trials.stimulus, lam_max
    )
    return float(rows.sum())


def _weight_matrix(
    params: GlmParams,
    counts: np.ndarray,
    dt: float,
    obs: str,
    u: np.ndarray | None,
    lam_max: float,
) -> tuple[np.ndarray, np.ndarray]:
    """d loglik / d eta per bin, plus per-row capped flags."""
    mat = np.atleast_2d(np.asarray(counts))
    eta = _eta_matrix(params, mat, u)
    cap = math.log(lam_max)
    clipped = (eta > cap).any(axis=1)
    mu = np.exp(np.minimum(eta, cap)) * dt
    x = mat.astype(np.float64)
    if obs == "poisson":
        return x - mu, clipped
    _require_binary(mat)
    p = -np.expm1(-mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, mu * np.exp(-mu) / p, 1.0)
    return x * ratio - (1.0 - x) * mu, clipped


def score_matrix(
    params: GlmParams,
    counts: np.ndarray,
    dt: float,
    obs: str,
    u: np.ndarray | None = None,
    lam_max: float = DEFAULT_LAM_MAX,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row score vectors d loglik / d (b, h, a), plus capped flags.

    Rows whose intensity hit the cap get a score of all zeros and a True
    flag; callers decide whether to exclude or fail.
    """
    check_observation_model(obs)
    mat = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    n, t = mat.shape
    w, clipped = _weight_matrix(params, mat, dt, obs, u, lam_max)
    n_h, n_a = params.n_history, params.n_stimulus
    score = np.zeros((n, 1 + n_h + n_a))
    score[:, 0] = w.sum(axis=1)
    for tau in range(1, n_h + 1):
        if tau < t:
            score[:, tau] = np.einsum("ij,ij->i", w[:, tau:], mat[:, : t - tau])
    if n_a:
        uu = np.asarray(u, dtype=np.float64)
        for tau in range(1, n_a + 1):
            if tau < t:
                score[:, n_h + tau] = w[:, tau:] @ uu[: t - tau]
    score[clipped] = 0.0
    return score, clipped


def score_function(
    params: GlmParams,
    x: SpikeTrain,
    u: np.ndarray | None = None,
    obs: str = "poisson",
    lam_max: float = DEFAULT_LAM_MAX,
) -> GradVec:
    """Gradient of the train's log-likelihood with respect to the parameters."""
    score, clipped = score_matrix(params, x.counts, x.dt, obs, u, lam_max)
    if clipped[0]:
        raise GradientUndefinedError(
            "intensity cap engaged on this input; the score is undefined"
        )
    return GradVec.from_vector(score[0], params.n_history, params.n_stimulus)


def nll_gradient(
    params: GlmParams,
    x: SpikeTrain,
    u: np.ndarray | None = None,
    obs: str = "poisson",
    lam_max: float = DEFAULT_LAM_MAX,
) -> GradVec:
    """Gradient of the negative log-likelihood; exact, refuses capped inputs."""
    score = score_function(params, x, u, obs, lam_max)
    return GradVec.from_vector(
        -score.to_vector(), params.n_history, params.n_stimulus
    )


def _nll_mean_and_grad(
    params: GlmParams,
    counts: np.ndarray,
    dt: float,
    obs: str,
    u: np.ndarray | None,
    lam_max: float,
    lambda_ridge: float,
) -> tuple[float, np.ndarray, bool]:
    """Mean NLL over rows plus its gradient vector; flag marks capped rows."""
    n = counts.shape[0]
    rows = loglik_rows(params, counts, dt, obs, u, lam_max)
    score, clipped = score_matrix(params, counts, dt, obs, u, lam_max)
    nll = -float(rows.mean())
    grad = -score.mean(axis=0)
    if lambda_ridge > 0 and params.n_history:
        nll += lambda_ridge * float(params.history @ params.history)
        grad[1 : 1 + params.n_history] += 2.0 * lambda_ridge * params.history
    return nll, grad, bool(clipped.any())


def fit_mle(
    trials: TrialSet,
    obs: str,
    config: FitConfig,
    init: GlmParams | None = None,
) -> tuple[GlmParams, FitTrace]:
    """Maximum-likelihood fit by full-batch adaptive gradient descent.

    Minimizes the mean per-trial NLL (plus an optional ridge penalty on the
    history filter). The step size halves whenever a step fails to improve
    the objective, so the convex problem is driven to a gradient max-norm
    below config.tolerance or until max_iters.
    """
    check_observation_model(obs)
    counts = trials.counts_matrix()
    dt = trials.dt
    u = trials.stimulus
    n_h = init.n_history if init is not None else config.history_bins
    n_a = (
        init.n_stimulus
        if init is not None
        else (config.stimulus_bins if u is not None else 0)
    )
    if init is None:
        rate = max(trials.mean_rate(), 1.0 / (trials.n_trials * trials.t_bins * dt))
        theta = np.zeros(1 + n_h + n_a)
        theta[0] = math.log(rate)
    else:
        theta = init.to_vector()

    trace = FitTrace(meta={"objective": "nll"})
    stepper = AdamStepper(theta.size, config.learning_rate)
    params = GlmParams.from_vector(theta, n_h, n_a)
    nll, grad, capped = _nll_mean_and_grad(
        params, counts, dt, obs, u, config.lam_max, config.lambda_ridge
    )
    if capped or not math.isfinite(nll):
        raise OptimizationError(
            "objective undefined at the initial point (capped or non-finite)",
            last_params=params,
        )
    t0 = time.perf_counter()
    for it in range(config.max_iters):
        gmax = float(np.max(np.abs(grad)))
        snapshot = (
            params
            if config.trace_stride and it % config.trace_stride == 0
            else None
        )
        trace.append(it, nll, None, gmax, 0,
                     (time.perf_counter() - t0) * 1e3, snapshot)
        t0 = time.perf_counter()
        if gmax < config.tolerance:
            break
        theta_new = theta - stepper.step(grad)
        params_new = GlmParams.from_vector(theta_new, n_h, n_a)
        nll_new, grad_new, capped = _nll_mean_and_grad(
            params_new, counts, dt, obs, u, config.lam_max, config.lambda_ridge
        )
        if capped or not math.isfinite(nll_new) or nll_new > nll:
            # reject the step; shrink and restart the moment estimates
            stepper.lr *= 0.5
            stepper.reset()
            if stepper.lr < 1e-14:
                if not math.isfinite(nll):
                    raise OptimizationError(
                        "objective diverged", last_params=params, trace=trace
                    )
                break
            continue
        # accepted: allow the step size to recover after earlier shrinks
        stepper.lr = min(stepper.lr * 1.1, 10.0 * config.learning_rate)
        theta, params, nll, grad = theta_new, params_new, nll_new, grad_new
    return params, trace


# ---------------------------------------------------------------------------
# sampling


def _trial_rng(seed: int, stream: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(trial)))
    return np.random.default_rng(ss)


def sample_free_running(
    params: GlmParams,
    dt: float,
    obs: str,
    n: int,
    t_bins: int,
    u: np.ndarray | None = None,
    seed: int = 0,
    stream: int = 0,
    lam_max: float = DEFAULT_LAM_MAX,
) -> tuple[TrialSet, np.ndarray]:
    """Ancestral sampling of n independent trials from the model's own past.

    Each trial consumes one dedicated RNG stream keyed by (seed, stream,
    trial index), so results do not depend on batching or scheduling. The
    returned flags mark trials whose intensity hit the cap at least once.
    """
    check_observation_model(obs)
    if n < 1:
        raise ParameterError(f"need n >= 1 trials, got {n}")
    if t_bins < 1:
        raise ParameterError(f"need t_bins >= 1, got {t_bins}")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    uniforms = np.empty((n, t_bins))
    for i in range(n):
        uniforms[i] = _trial_rng(seed, stream, i).random(t_bins)
    np.maximum(uniforms, np.finfo(float).tiny, out=uniforms)

    h = params.history
    n_h = h.size
    h_rev = h[::-1].copy()
    stim_drive = np.zeros(t_bins)
    if params.stimulus_filter is not None and params.stimulus_filter.size:
        if u is None:
            raise ShapeError("params carry a stimulus filter but no stimulus given")
        u = np.asarray(u, dtype=np.float64)
        if u.size != t_bins:
            raise ShapeError(f"stimulus length {u.size} does not match {t_bins} bins")
        stim_drive = lagged_filter_output(params.stimulus_filter, u)

    cap = math.log(lam_max)
    x = np.zeros((n, t_bins), dtype=np.float64)
    runaway = np.zeros(n, dtype=bool)
    bern = obs == "bernoulli"
    for t in range(t_bins):
        lag = min(t, n_h)
        eta = np.full(n, params.bias + stim_drive[t])
        if lag:
            eta += x[:, t - lag : t] @ h_rev[n_h - lag :]
        over = eta > cap
        if over.any():
            runaway |= over
            np.minimum(eta, cap, out=eta)
        mu = np.exp(eta) * dt
        if bern:
            x[:, t] = uniforms[:, t] < -np.expm1(-mu)
        else:
            x[:, t] = _poisson.ppf(uniforms[:, t], mu)
    trials = TrialSet.from_counts(x.astype(np.int64), dt, stimulus=u)
    return trials, runaway


# ---------------------------------------------------------------------------
# reporting helpers


def homogeneous_baseline(trials: TrialSet) -> GlmParams:
    """History-free model at the set's empirical rate."""
    rate = trials.mean_rate()
    if rate <= 0:
        raise InsufficientDataError("no spikes; the rate baseline is undefined")
    return GlmParams(math.log(rate), np.empty(0))


def relative_ll_per_spike(
    params: GlmParams,
    trials: TrialSet,
    obs: str,
    lam_max: float = DEFAULT_LAM_MAX,
) -> float:
    """Log-likelihood gain over the rate-matched homogeneous model, nats/spike."""
    total = trials.total_count()
    if total == 0:
        raise InsufficientDataError("no spikes; relative log-likelihood undefined")
    baseline = homogeneous_baseline(trials)
    ll = log_likelihood_total(params, trials, obs, lam_max)
    ll0 = log_likelihood_total(baseline, trials, obs, lam_max)
    return (ll - ll0) / total


# ---------------------------------------------------------------------------
# parameter files


def save_params(params: GlmParams, dt: float, obs: str, path) -> None:
    """Write a self-describing parameter file (round-trips exactly)."""
    check_observation_model(obs)
    lines = [
        "format = glm-params-v1",
        f"dt = {repr(float(dt))}",
        f"observation = {obs}",
        f"bias = {repr(params.bias)}",
        "history = " + " ".join(repr(float(v)) for v in params.history),
    ]
    if params.stimulus_filter is not None:
        lines.append(
            "stimulus_filter = "
            + " ".join(repr(float(v)) for v in params.stimulus_filter)
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> tuple[GlmParams, float, str]:
    """Read a parameter file; returns (params, dt, observation model)."""
    fields: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path, lineno)
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        dt = float(fields["dt"])
        obs = check_observation_model(fields["observation"])
        bias = float(fields["bias"])
        history = np.array(
            [float(v) for v in fields.get("history", "").split()], dtype=np.float64
        )
        stim = None
        if "stimulus_filter" in fields:
            stim = np.array(
                [float(v) for v in fields["stimulus_filter"].split()],
                dtype=np.float64,
            )
    except KeyError as missing:
        raise ParseError(f"missing field {missing}", path) from None
    except ValueError as bad:
        raise ParseError(f"malformed numeric field: {bad}", path) from None
    return GlmParams(bias, history, stim), dt, obs
