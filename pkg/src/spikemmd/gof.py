"""Goodness-of-fit statistics comparing generated samples against data."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import glm as _glm
from . import mmd as _mmd
from .errors import InsufficientDataError, ParseError, ShapeError
from .glm import GlmParams
from .kernels import KernelSpec
from .spiketrain import TrialSet, autocorr_matrix, default_max_lag, isi_stats


def runaway_probability(samples: TrialSet, data: TrialSet) -> float:
    """Fraction of sample trials whose mean rate exceeds 3x the data maximum.

    The threshold is three times the largest per-trial mean firing rate
    observed in the data.
    """
    return _mmd._runaway_fraction(samples, data)


def autocorr_rmse(
    samples: TrialSet,
    reference: TrialSet,
    max_lag: int,
    normalized: bool = False,
) -> float:
    """RMSE between the sets' mean autocorrelations over lags 1..max_lag.

    Lag 0 is excluded so the statistic measures temporal structure rather
    than squared rate. With normalized=True each set's mean autocorrelation
    is divided by its squared mean count per bin.
    """
    if samples.t_bins != reference.t_bins or samples.dt != reference.dt:
        raise ShapeError("trial sets disagree in bin count or bin width")
    mean_s = autocorr_matrix(samples.counts_matrix(), max_lag).mean(axis=0)[1:]
    mean_r = autocorr_matrix(reference.counts_matrix(), max_lag).mean(axis=0)[1:]
    if normalized:
        for vec, ts in ((mean_s, samples), (mean_r, reference)):
            per_bin = ts.total_count() / (ts.n_trials * ts.t_bins)
            if per_bin > 0:
                vec /= per_bin**2
    diff = mean_s - mean_r
    return float(np.sqrt(np.mean(diff**2)))


def time_rescale_ks(
    params: GlmParams,
    trials: TrialSet,
    obs: str,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> tuple[float, np.ndarray]:
    """KS distance of time-rescaled intervals from the uniform law.

    Each interspike interval is mapped through z = 1 - exp(-Lambda) with
    Lambda the summed intensity mass between the two spikes; under a correct
    model the pooled z values are uniform on [0, 1].
    """
    _glm.check_observation_model(obs)
    lam, _ = _glm.intensity_matrix(
        params, trials.counts_matrix(), trials.stimulus, lam_max
    )
    mu = lam * trials.dt
    z_chunks = []
    for i, tr in enumerate(trials.trials):
        bins = tr.spike_bins()
        if bins.size < 2:
            continue
        cum = np.cumsum(mu[i])
        big_lambda = cum[bins[1:]] - cum[bins[:-1]]
        z_chunks.append(1.0 - np.exp(-big_lambda))
    if not z_chunks:
        raise InsufficientDataError(
            "need at least two spikes in one trial for time rescaling"
        )
    z = np.sort(np.concatenate(z_chunks))
    n = z.size
    grid_hi = np.arange(1, n + 1) / n
    grid_lo = np.arange(0, n) / n
    ks = float(np.max(np.maximum(grid_hi - z, z - grid_lo)))
    return ks, z


def ks_critical(n: int) -> float:
    """95 percent critical value for the KS statistic on n intervals."""
    return 1.36 / math.sqrt(n)


@dataclass
class GofReport:
    """Aggregate panel of fit statistics; None marks an absent field."""

    rel_ll_train: float | None = None
    rel_ll_valid: float | None = None
    isi_mean_model: float | None = None
    isi_mean_data: float | None = None
    isi_cv_model: float | None = None
    isi_cv_data: float | None = None
    autocorr_rmse: float | None = None
    runaway_prob: float | None = None
    ks_stat: float | None = None
    ks_critical: float | None = None
    mmd2_final: float | None = None
    n_samples_eval: int | None = None


def save_report(report: GofReport, path) -> None:
    """One field per line; absent fields written explicitly."""
    lines = ["format = gof-report-v1"]
    for f in fields(GofReport):
        value = getattr(report, f.name)
        if value is None:
            lines.append(f"{f.name} = absent")
        elif f.name == "n_samples_eval":
            lines.append(f"{f.name} = {int(value)}")
        else:
            lines.append(f"{f.name} = {repr(float(value))}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_report(path) -> GofReport:
    values = {}
    names = {f.name for f in fields(GofReport)}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("format"):
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", path, lineno)
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in names:
                raise ParseError(f"unknown report field {key!r}", path, lineno)
            if raw == "absent":
                values[key] = None
            elif key == "n_samples_eval":
                values[key] = int(raw)
            else:
                values[key] = float(raw)
    return GofReport(**values)


def report_csv_row(report: GofReport) -> tuple[str, str]:
    """Header and row strings for appending reports to a results table."""
    names = [f.name for f in fields(GofReport)]
    cells = []
    for name in names:
        value = getattr(report, name)
        if value is None:
            cells.append("absent")
        elif name == "n_samples_eval":
            cells.append(str(int(value)))
        else:
            cells.append(repr(float(value)))
    return ",".join(names), ",".join(cells)


def build_report(
    params: GlmParams,
    data_train: TrialSet,
    data_valid: TrialSet | None,
    samples: TrialSet,
    spec: KernelSpec | None,
    obs: str,
    max_lag: int | None = None,
    lam_max: float = _glm.DEFAULT_LAM_MAX,
) -> GofReport:
    """Fill every report field that is computable from the given inputs.

    The reference set for sample statistics is the validation set when
    present, the training set otherwise. Fields that cannot be computed
    (too few spikes, missing inputs) are left absent, never zeroed.
    """
    reference = data_valid if data_valid is not None else data_train
    if max_lag is None:
        max_lag = default_max_lag(reference.t_bins)
    report = GofReport(n_samples_eval=samples.n_trials)

    report.rel_ll_train = _try(
        lambda: _glm.relative_ll_per_spike(params, data_train, obs, lam_max)
    )
    if data_valid is not None:
        report.rel_ll_valid = _try(
            lambda: _glm.relative_ll_per_spike(params, data_valid, obs, lam_max)
        )
    stats_model = _try(lambda: isi_stats(samples))
    if stats_model is not None:
        report.isi_mean_model, report.isi_cv_model = stats_model
    stats_data = _try(lambda: isi_stats(reference))
    if stats_data is not None:
        report.isi_mean_data, report.isi_cv_data = stats_data
    report.autocorr_rmse = autocorr_rmse(samples, reference, max_lag)
    report.runaway_prob = runaway_probability(samples, reference)
    ks = _try(lambda: time_rescale_ks(params, reference, obs, lam_max))
    if ks is not None:
        report.ks_stat = ks[0]
        report.ks_critical = ks_critical(ks[1].size)
    if spec is not None and data_train.n_trials >= 2 and samples.n_trials >= 2:
        est = _mmd.mmd2_between(
            data_train, samples, spec,
            params=params if spec.model_based else None,
            lam_max=lam_max,
        )
        report.mmd2_final = est.value
    return report


def _try(thunk):
    try:
        return thunk()
    except InsufficientDataError:
        return None
