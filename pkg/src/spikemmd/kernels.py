"""Spike-train kernels and feature maps, fixed and model-based.

Every tag except ``cumcount-gaussian`` is an explicit feature map, so Gram
blocks and discrepancy estimates can be assembled in time linear in the
number of trials. Model-based tags depend on the GLM parameters through the
history term H or the conditional intensity, and expose analytic gradients
with respect to those parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import glm as _glm
from .errors import (
    ContractError,
    GradientUndefinedError,
    ParameterError,
    ParseError,
    ShapeError,
)
from .glm import GlmParams, GradVec
from .spiketrain import (
    SpikeTrain,
    TrialSet,
    autocorr_matrix,
    autocorrelation,
    default_max_lag,
    smooth_matrix,
)

KERNEL_TAGS = (
    "cumcount-gaussian",
    "feature-autocorr",
    "feature-smoothed",
    "feature-mean-history",
    "history-autocorr",
    "mean-ci",
)
MODEL_BASED_TAGS = frozenset(
    {"feature-mean-history", "history-autocorr", "mean-ci"}
)
_NEEDS_MAX_LAG = frozenset({"feature-autocorr", "history-autocorr"})


@dataclass(frozen=True)
class KernelSpec:
    """Tagged kernel description with hyperparameters.

    sigma: bandwidth of the cumulative-count Gaussian kernel, in
        count^2 * seconds units; None defers to the median heuristic.
    bandwidth: smoothing std in seconds (feature-smoothed).
    max_lag: autocorrelation range in bins; None defers to the data default.
    """

    tag: str
    sigma: float | None = None
    bandwidth: float | None = None
    max_lag: int | None = None

    def __post_init__(self):
        if self.tag not in KERNEL_TAGS:
            raise ParameterError(
                f"unknown kernel tag {self.tag!r}, expected one of {KERNEL_TAGS}"
            )
        if self.sigma is not None and not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ParameterError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.max_lag is not None and self.max_lag < 1:
            raise ParameterError(f"max_lag must be >= 1, got {self.max_lag}")
        if self.tag == "feature-smoothed" and self.bandwidth is None:
            raise ParameterError("feature-smoothed requires a bandwidth")

    @property
    def model_based(self) -> bool:
        return self.tag in MODEL_BASED_TAGS


def resolve_spec(spec: KernelSpec, trials: TrialSet) -> KernelSpec:
    """Fill data-dependent defaults (sigma heuristic, max-lag cap)."""
    out = spec
    if spec.tag == "cumcount-gaussian" and spec.sigma is None:
        out = replace(out, sigma=cumcount_sigma_heuristic(trials))
    if spec.tag in _NEEDS_MAX_LAG and spec.max_lag is None:
        out = replace(out, max_lag=default_max_lag(trials.t_bins))
    return out


def save_spec(spec: KernelSpec, path) -> None:
    lines = ["format = kernel-spec-v1", f"tag = {spec.tag}"]
    for name in ("sigma", "bandwidth", "max_lag"):
        value = getattr(spec, name)
        if value is not None:
            lines.append(f"{name} = {repr(value) if name != 'max_lag' else int(value)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_spec(path) -> KernelSpec:
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
    if "tag" not in fields:
        raise ParseError("missing field 'tag'", path)
    try:
        return KernelSpec(
            tag=fields["tag"],
            sigma=float(fields["sigma"]) if "sigma" in fields else None,
            bandwidth=float(fields["bandwidth"]) if "bandwidth" in fields else None,
            max_lag=int(fields["max_lag"]) if "max_lag" in fields else None,
        )
    except ValueError as bad:
        raise ParseError(f"malformed numeric field: {bad}", path) from None


# ---------------------------------------------------------------------------
# cumulative-count Gaussian kernel


def _check_pair(x: SpikeTrain, xp: SpikeTrain) -> None:
    if x.t_bins != xp.t_bins or x.dt != xp.dt:
        raise ShapeError(
            f"trains disagree: ({x.t_bins} bins, dt={x.dt}) vs "
            f"({xp.t_bins} bins, dt={xp.dt})"
        )


def cumcount_kernel(x: SpikeTrain, xp: SpikeTrain, sigma: float) -> float:
    """exp of minus the integrated squared cumulative-count gap over sigma."""
    _check_pair(x, xp)
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    gap = np.cumsum(x.counts) - np.cumsum(xp.counts)
    d2 = float((gap.astype(np.float64) ** 2).sum() * x.dt)
    return math.exp(-d2 / sigma)


def _cumcount_sqdist(counts_a: np.ndarray, counts_b: np.ndarray,
                     dt: float) -> np.ndarray:
    ia = np.cumsum(counts_a, axis=1).astype(np.float64)
    ib = np.cumsum(counts_b, axis=1).astype(np.float64)
    sq_a = np.einsum("ij,ij->i", ia, ia)
    sq_b = np.einsum("ij,ij->i", ib, ib)
    d2 = (sq_a[:, None] + sq_b[None, :] - 2.0 * (ia @ ib.T)) * dt
    return np.maximum(d2, 0.0)


def cumcount_sigma_heuristic(trials: TrialSet) -> float:
    """Median of the integrated squared count gap over distinct trial pairs."""
    if trials.n_trials < 2:
        raise ParameterError("the sigma heuristic needs at least 2 trials")
    counts = trials.counts_matrix()
    d2 = _cumcount_sqdist(counts, counts, trials.dt)
    vals = d2[np.triu_indices(trials.n_trials, k=1)]
    med = float(np.median(vals))
    return med if med > 0 else 1.0


# ---------------------------------------------------------------------------
# feature maps


def feature_autocorr(x: SpikeTrain, max_lag: int) -> np.ndarray:
    """Raw autocorrelation feature vector, lags 0..max_lag."""
    return autocorrelation(x, max_lag).values.copy()


def feature_smoothed(x: SpikeTrain, bandwidth: float) -> np.ndarray:
    """Gaussian-smoothed count vector feature."""
    return smooth_matrix(x.counts, bandwidth, x.dt)[0]


def history_term(params: GlmParams, x: SpikeTrain) -> np.ndarray:
    """History-filter drive H[t] = sum_tau h_tau * x[t - tau]."""
    return _glm.lagged_filter_output(params.history, x.counts)


def mean_history_feature(params: GlmParams, x: SpikeTrain) -> float:
    """Time average of the history term."""
    return float(history_term(params, x).mean())


def history_autocorr_kernel(params: GlmParams, x: SpikeTrain, xp: SpikeTrain,
                            max_lag: int) -> float:
    """Dot product of the raw autocorrelations of the two history terms."""
    _check_pair(x, xp)
    if max_lag < 1:
        raise ParameterError(f"max_lag must be >= 1, got {max_lag}")
    h_x = _glm.lagged_filter_output(params.history, x.counts)
    h_xp = _glm.lagged_filter_output(params.history, xp.counts)
    c_x = autocorr_matrix(h_x, max_lag)[0]
    c_xp = autocorr_matrix(h_xp, max_lag)[0]
    return float(c_x @ c_xp)


def mean_ci_kernel(
    params: GlmParams,
    x: SpikeTrain,
    xp: SpikeTrain,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> float:
    """Dot product over time of the two conditional-intensity series."""
    _check_pair(x, xp)
    lam_x, _ = _glm.intensity_matrix(params, x.counts, u, lam_max)
    lam_xp, _ = _glm.intensity_matrix(params, xp.counts, u, lam_max)
    return float(lam_x[0] @ lam_xp[0])


def feature_matrix(
    spec: KernelSpec,
    counts: np.ndarray,
    dt: float,
    params: GlmParams | None = None,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> np.ndarray:
    """Per-trial feature rows for any explicit-feature tag.

    cumcount-gaussian has no explicit feature map and is rejected.
    """
    _check_params_presence(spec, params)
    mat = np.atleast_2d(np.asarray(counts))
    if spec.tag == "feature-autocorr":
        return autocorr_matrix(mat, _require(spec.max_lag, "max_lag"))
    if spec.tag == "feature-smoothed":
        return smooth_matrix(mat, _require(spec.bandwidth, "bandwidth"), dt)
    if spec.tag == "feature-mean-history":
        h = _glm.lagged_filter_output(params.history, mat)
        return h.mean(axis=1, keepdims=True)
    if spec.tag == "history-autocorr":
        h = _glm.lagged_filter_output(params.history, mat)
        return autocorr_matrix(h, _require(spec.max_lag, "max_lag"))
    if spec.tag == "mean-ci":
        lam, _ = _glm.intensity_matrix(params, mat, u, lam_max)
        return lam
    raise ContractError(
        f"kernel {spec.tag!r} has no explicit feature map"
    )


def _require(value, name):
    if value is None:
        raise ParameterError(f"kernel spec is missing {name}; resolve it first")
    return value


def _check_params_presence(spec: KernelSpec, params: GlmParams | None) -> None:
    if spec.model_based and params is None:
        raise ContractError(f"kernel {spec.tag!r} is model-based and needs params")
    if not spec.model_based and params is not None:
        raise ContractError(f"kernel {spec.tag!r} is fixed and must not get params")


# ---------------------------------------------------------------------------
# model-based feature gradients


def _xcorr_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """r[m] = sum_s b[s] * a[s + m] for m = -(T-1)..(T-1), index m + T - 1."""
    return np.correlate(a, b, mode="full")


def feature_jacobians(
    spec: KernelSpec,
    params: GlmParams,
    counts: np.ndarray,
    dt: float,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features and their parameter Jacobians for a model-based tag.

    Returns (F, J, clipped) with F of shape (n, d), J of shape (n, d, p)
    holding dF/d(bias, history, stimulus), and clipped flagging rows whose
    intensity hit the cap (possible only for mean-ci).
    """
    if not spec.model_based:
        raise ContractError(f"kernel {spec.tag!r} is fixed; no parameter gradient")
    mat = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    n, t = mat.shape
    n_h, n_a = params.n_history, params.n_stimulus
    p = 1 + n_h + n_a
    clipped = np.zeros(n, dtype=bool)

    if spec.tag == "feature-mean-history":
        h = _glm.lagged_filter_output(params.history, mat)
        feats = h.mean(axis=1, keepdims=True)
        jac = np.zeros((n, 1, p))
        cums = np.cumsum(mat, axis=1)
        for a in range(1, n_h + 1):
            if a < t:
                jac[:, 0, a] = cums[:, t - 1 - a] / t
        return feats, jac, clipped

    if spec.tag == "history-autocorr":
        max_lag = _require(spec.max_lag, "max_lag")
        h = _glm.lagged_filter_output(params.history, mat)
        feats = autocorr_matrix(h, max_lag)
        jac = np.zeros((n, max_lag + 1, p))
        lags = np.arange(max_lag + 1)
        # dC(lag)/dh_a = r[lag + a] + r[a - lag] - tail(lag, a), where
        # r[m] = sum_s x[s] h[s + m] and the tail removes cross terms past
        # the autocorrelation's overlap window:
        # tail(lag, a) = sum_{j < min(a, lag)} h[t - lag + j] * x[t - a + j]
        js = np.arange(n_h)
        q_idx = np.minimum(t - 1 - lags[:, None] + js[None, :] + 1, t - 1)
        q_mask = js[None, :] < lags[:, None]
        a_col = np.arange(1, n_h + 1)
        p_idx = np.minimum(t - 1 - a_col[:, None] + js[None, :] + 1, t - 1)
        p_mask = js[None, :] < a_col[:, None]
        idx1 = (t - 1) + lags[:, None] + a_col[None, :]
        idx2 = (t - 1) + a_col[None, :] - lags[:, None]
        pad = max_lag + n_h
        for i in range(n):
            r = _xcorr_full(h[i], mat[i])
            padded = np.zeros(2 * t - 1 + 2 * pad)
            padded[pad : pad + 2 * t - 1] = r
            q = np.where(q_mask, h[i][q_idx], 0.0)
            pm = np.where(p_mask, mat[i][p_idx], 0.0)
            jac[i, :, 1 : n_h + 1] = (
                padded[pad + idx1] + padded[pad + idx2] - q @ pm.T
            )
        return feats, jac, clipped

    if spec.tag == "mean-ci":
        lam, clipped = _glm.intensity_matrix(params, mat, u, lam_max)
        feats = lam
        jac = np.zeros((n, t, p))
        jac[:, :, 0] = lam
        for tau in range(1, n_h + 1):
            if tau < t:
                jac[:, tau:, tau] = lam[:, tau:] * mat[:, : t - tau]
        if n_a:
            uu = np.asarray(u, dtype=np.float64)
            for tau in range(1, n_a + 1):
                if tau < t:
                    jac[:, tau:, n_h + tau] = lam[:, tau:] * uu[: t - tau]
        jac[clipped] = 0.0
        return feats, jac, clipped

    raise ContractError(f"no parameter gradient for tag {spec.tag!r}")


def kernel_grad_theta(
    spec: KernelSpec,
    params: GlmParams,
    x: SpikeTrain,
    xp: SpikeTrain,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> GradVec:
    """Analytic gradient of k(x, xp; params) with the trains held fixed."""
    _check_pair(x, xp)
    counts = np.stack([x.counts, xp.counts])
    feats, jac, clipped = feature_jacobians(spec, params, counts, x.dt, u, lam_max)
    if clipped.any():
        raise GradientUndefinedError(
            "intensity cap engaged; the kernel gradient is undefined here"
        )
    vec = jac[0].T @ feats[1] + jac[1].T @ feats[0]
    return GradVec.from_vector(vec, params.n_history, params.n_stimulus)


# ---------------------------------------------------------------------------
# Gram assembly


def gram(
    spec: KernelSpec,
    a: TrialSet,
    b: TrialSet,
    params: GlmParams | None = None,
    u: np.ndarray | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> np.ndarray:
    """Pairwise kernel matrix G[i, j] = k(a_i, b_j).

    Feature-map tags build per-trial features once and take outer products;
    the cumulative-count kernel is evaluated pairwise.
    """
    _check_params_presence(spec, params)
    if a.t_bins != b.t_bins or a.dt != b.dt:
        raise ShapeError("trial sets disagree in bin count or bin width")
    if u is None:
        u = a.stimulus
    ca, cb = a.counts_matrix(), b.counts_matrix()
    if spec.tag == "cumcount-gaussian":
        sigma = _require(spec.sigma, "sigma")
        return np.exp(-_cumcount_sqdist(ca, cb, a.dt) / sigma)
    fa = feature_matrix(spec, ca, a.dt, params, u, lam_max)
    fb = feature_matrix(spec, cb, b.dt, params, u, lam_max)
    return fa @ fb.T
