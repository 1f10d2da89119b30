"""Binned spike trains, trial sets, file formats, and parameter-free features.

A spike train is a vector of non-negative per-bin counts at a fixed bin
width ``dt`` (seconds). Bins are half-open ``[t*dt, (t+1)*dt)``; a spike
time exactly at the recording duration is out of range, never clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientDataError,
    ParameterError,
    ParseError,
    RangeError,
    ShapeError,
)

FEATURE_KINDS = ("cumulative-count", "smoothed-rate", "autocorrelation")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _as_counts(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ShapeError(f"counts must be a 1-d sequence, got shape {arr.shape}")
    if arr.size < 1:
        raise ShapeError("a spike train needs at least one bin")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(arr)
        if not np.all(np.isfinite(arr)) or np.any(np.abs(arr - rounded) > 0):
            raise ShapeError("bin counts must be integers")
        arr = rounded
    arr = arr.astype(np.int64, copy=True)
    if np.any(arr < 0):
        raise ShapeError("bin counts must be non-negative")
    return arr


@dataclass(frozen=True)
class SpikeTrain:
    """One trial of binned spike counts.

    counts: per-bin non-negative integers, length equals the bin count.
    dt: bin width in seconds, strictly positive.
    """

    counts: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "counts", _freeze(_as_counts(self.counts)))
        object.__setattr__(self, "dt", float(self.dt))
        if not (self.dt > 0.0) or not math.isfinite(self.dt):
            raise ParameterError(f"dt must be a positive real, got {self.dt}")

    @property
    def t_bins(self) -> int:
        return int(self.counts.size)

    @property
    def duration(self) -> float:
        return self.t_bins * self.dt

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def is_binary(self) -> bool:
        return bool(np.all(self.counts <= 1))

    def spike_bins(self) -> np.ndarray:
        """Bin indices with multiplicity, sorted; a count-k bin appears k times."""
        idx = np.nonzero(self.counts)[0]
        return np.repeat(idx, self.counts[idx])


@dataclass(frozen=True)
class TrialSet:
    """Homogeneous collection of trials, optionally with a shared stimulus."""

    trials: tuple[SpikeTrain, ...]
    stimulus: np.ndarray | None = None

    def __post_init__(self):
        trials = tuple(self.trials)
        if not trials:
            raise ShapeError("a trial set must contain at least one trial")
        dt0, t0 = trials[0].dt, trials[0].t_bins
        for i, tr in enumerate(trials):
            if tr.dt != dt0 or tr.t_bins != t0:
                raise ShapeError(
                    f"trial {i} has (dt={tr.dt}, bins={tr.t_bins}), "
                    f"expected (dt={dt0}, bins={t0})"
                )
        object.__setattr__(self, "trials", trials)
        if self.stimulus is not None:
            stim = np.asarray(self.stimulus, dtype=np.float64)
            if stim.ndim != 1 or stim.size != t0:
                raise ShapeError(
                    f"stimulus length {stim.size} does not match {t0} bins"
                )
            if not np.all(np.isfinite(stim)):
                raise ShapeError("stimulus values must be finite")
            object.__setattr__(self, "stimulus", _freeze(stim))

    @classmethod
    def from_counts(cls, counts, dt: float, stimulus=None) -> "TrialSet":
        mat = np.atleast_2d(np.asarray(counts))
        return cls(tuple(SpikeTrain(row, dt) for row in mat), stimulus)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def dt(self) -> float:
        return self.trials[0].dt

    @property
    def t_bins(self) -> int:
        return self.trials[0].t_bins

    def counts_matrix(self) -> np.ndarray:
        """Stack trials into an (n_trials, t_bins) int array."""
        return np.stack([tr.counts for tr in self.trials])

    def subset(self, indices) -> "TrialSet":
        return TrialSet(tuple(self.trials[i] for i in indices), self.stimulus)

    def total_count(self) -> int:
        return int(sum(tr.total for tr in self.trials))

    def mean_rate(self) -> float:
        """Pooled mean firing rate in Hz over all trials."""
        return self.total_count() / (self.n_trials * self.t_bins * self.dt)


@dataclass(frozen=True)
class FeatureSeries:
    """A real-valued series derived from one spike train."""

    values: np.ndarray
    kind: str
    meta: float | int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ShapeError("feature series must be 1-d")
        object.__setattr__(self, "values", _freeze(vals))
        if self.kind not in FEATURE_KINDS:
            raise ParameterError(f"unknown feature kind {self.kind!r}")


# ---------------------------------------------------------------------------
# feature series


def cumulative_count(x: SpikeTrain) -> FeatureSeries:
    """Running total of spike counts up to and including each bin."""
    return FeatureSeries(np.cumsum(x.counts).astype(np.float64), "cumulative-count")


def gaussian_window(bandwidth: float, dt: float) -> np.ndarray:
    """Unit-mass Gaussian window with std bandwidth/dt bins, truncated at 4 std."""
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be positive, got {bandwidth}")
    sd = bandwidth / dt
    radius = max(1, int(math.ceil(4.0 * sd)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (offsets / sd) ** 2)
    return w / w.sum()


def smooth_matrix(counts: np.ndarray, bandwidth: float, dt: float) -> np.ndarray:
    """Same-length Gaussian smoothing of each row of a (n, t) count matrix."""
    w = gaussian_window(bandwidth, dt)
    mat = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    return np.stack([np.convolve(row, w, mode="same") for row in mat])


def smooth(x: SpikeTrain, bandwidth: float) -> FeatureSeries:
    """Gaussian-smoothed spike counts; total mass is preserved away from edges."""
    out = smooth_matrix(x.counts, bandwidth, x.dt)[0]
    return FeatureSeries(out, "smoothed-rate", meta=float(bandwidth))


def autocorr_matrix(counts: np.ndarray, max_lag: int) -> np.ndarray:
    """Raw autocorrelation rows Sum_t c[t]*c[t+lag] for lag 0..max_lag."""
    mat = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    t = mat.shape[1]
    out = np.zeros((mat.shape[0], max_lag + 1), dtype=np.float64)
    for lag in range(min(max_lag, t - 1) + 1):
        out[:, lag] = np.einsum("ij,ij->i", mat[:, : t - lag], mat[:, lag:])
    return out


def autocorrelation(x: SpikeTrain, max_lag: int) -> FeatureSeries:
    """Raw (unnormalized) autocorrelation at lags 0..max_lag."""
    if not 1 <= max_lag < x.t_bins:
        raise ParameterError(
            f"max_lag must be in [1, {x.t_bins - 1}], got {max_lag}"
        )
    vals = autocorr_matrix(x.counts, max_lag)[0]
    return FeatureSeries(vals, "autocorrelation", meta=int(max_lag))


def default_max_lag(t_bins: int) -> int:
    """Default autocorrelation range: all available lags, capped at 500 bins."""
    return min(t_bins - 1, 500)


# ---------------------------------------------------------------------------
# interval and rate statistics


def pooled_isis(trials: TrialSet) -> np.ndarray:
    """Within-trial interspike intervals in seconds, pooled across trials.

    k co-binned spikes contribute k-1 zero-length intervals; intervals never
    span trial boundaries.
    """
    chunks = []
    for tr in trials.trials:
        bins = tr.spike_bins()
        if bins.size >= 2:
            chunks.append(np.diff(bins) * tr.dt)
    if not chunks:
        return np.empty(0, dtype=np.float64)
    return np.concatenate(chunks)


def isi_stats(trials: TrialSet) -> tuple[float, float]:
    """Pooled ISI mean (seconds) and coefficient of variation (std/mean)."""
    isis = pooled_isis(trials)
    if isis.size < 2:
        raise InsufficientDataError(
            f"need at least 2 pooled interspike intervals, found {isis.size}"
        )
    mean = float(isis.mean())
    cv = float(isis.std() / mean) if mean > 0 else float("inf")
    return mean, cv


@dataclass(frozen=True)
class RateSummary:
    """Per-trial firing rates plus the set-level maximum of the means."""

    mean_rates: np.ndarray
    max_windowed_rates: np.ndarray
    max_mean_rate: float


def firing_rate(trials: TrialSet, window: int) -> RateSummary:
    """Per-trial mean rate and max sliding-window rate, in Hz."""
    if window < 1:
        raise ParameterError(f"window must be >= 1 bin, got {window}")
    window = min(window, trials.t_bins)
    mat = trials.counts_matrix().astype(np.float64)
    dt = trials.dt
    means = mat.sum(axis=1) / (trials.t_bins * dt)
    kernel = np.ones(window)
    maxes = np.array(
        [np.convolve(row, kernel, mode="valid").max() / (window * dt) for row in mat]
    )
    return RateSummary(_freeze(means), _freeze(maxes), float(means.max()))


# ---------------------------------------------------------------------------
# file formats

FORMATS = ("spike-times-text", "binned-csv")


def load_trials(
    path,
    format: str,
    dt: float,
    duration: float,
    header: bool = False,
) -> TrialSet:
    """Read a trial set from disk.

    spike-times-text: one trial per line of whitespace-separated spike times
    in seconds; ``#`` lines are comments; an empty line is a spike-free trial.
    binned-csv: one trial per row of comma-separated integer counts, with an
    optional header row.
    """
    if format not in FORMATS:
        raise ParameterError(f"unknown format {format!r}, expected one of {FORMATS}")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    if duration < dt:
        raise ParameterError(f"duration {duration} shorter than one bin {dt}")
    t_bins = int(math.ceil(duration / dt))
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    if format == "spike-times-text":
        return _parse_spike_times(text, path, dt, duration, t_bins)
    return _parse_binned_csv(text, path, dt, t_bins, header)


def _parse_spike_times(text, path, dt, duration, t_bins) -> TrialSet:
    trials = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith("#"):
            continue
        counts = np.zeros(t_bins, dtype=np.int64)
        for token in line.split():
            try:
                t = float(token)
            except ValueError:
                raise ParseError(
                    f"not a decimal spike time: {token!r}", path, lineno
                ) from None
            if not math.isfinite(t) or t < 0.0 or t >= duration:
                raise RangeError(
                    f"{path}:{lineno}: spike time {t} outside [0, {duration})"
                )
            idx = min(int(t / dt), t_bins - 1)
            counts[idx] += 1
        trials.append(SpikeTrain(counts, dt))
    if not trials:
        raise ParseError("file contains no trials", path)
    return TrialSet(tuple(trials))


def _parse_binned_csv(text, path, dt, t_bins, header) -> TrialSet:
    rows = []
    lines = text.splitlines()
    start = 1 if header and lines else 0
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            row = np.array([int(c.strip()) for c in cells], dtype=np.int64)
        except ValueError:
            raise ParseError("row contains a non-integer count", path, lineno) from None
        if rows and row.size != rows[0].size:
            raise ShapeError(
                f"{path}:{lineno}: row length {row.size} differs from {rows[0].size}"
            )
        rows.append(row)
    if not rows:
        raise ParseError("file contains no trials", path)
    if rows[0].size != t_bins:
        raise ShapeError(
            f"{path}: rows have {rows[0].size} bins but duration/dt implies {t_bins}"
        )
    return TrialSet.from_counts(np.stack(rows), dt)


def save_trials(trials: TrialSet, path, format: str = "spike-times-text",
                header: bool = False) -> None:
    """Write a trial set; spike times are placed at bin centers."""
    if format not in FORMATS:
        raise ParameterError(f"unknown format {format!r}, expected one of {FORMATS}")
    lines = []
    if format == "spike-times-text":
        for tr in trials.trials:
            times = (tr.spike_bins() + 0.5) * tr.dt
            lines.append(" ".join(repr(float(t)) for t in times))
    else:
        if header:
            lines.append(",".join(f"bin{i}" for i in range(trials.t_bins)))
        for tr in trials.trials:
            lines.append(",".join(str(int(c)) for c in tr.counts))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def feature_to_csv(series: FeatureSeries, path) -> None:
    """Export a feature series as (index, value) CSV rows."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(series.values):
            fh.write(f"{i},{repr(float(v))}\n")
