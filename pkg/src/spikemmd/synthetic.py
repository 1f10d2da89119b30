"""Synthetic ground-truth regimes for demos, calibration, and tests."""

from __future__ import annotations

import math

import numpy as np

from .glm import GlmParams


def toy_ground_truth(base_rate_hz: float = 25.0) -> GlmParams:
    """Biphasic history filter: strong early suppression, mild late excitation.

    The early suppression is deep enough that millisecond bins rarely catch
    a spike pair at those lags, so the maximum-likelihood coefficients there
    drift far negative while distribution matching stays bounded."""
    history = np.array([-3.5, -2.8, -2.2, -1.6, -1.1, -0.7, 0.2, 0.3])
    return GlmParams(math.log(base_rate_hz), history)


TOY_DT = 0.001
TOY_T_BINS = 400
TOY_N_TRIALS = 50


def omitted_drive_regime(
    base_rate_hz: float = 25.0,
    drive_amplitude: float = 1.4,
    drive_freq_hz: float = 3.0,
    t_bins: int = 1000,
    dt: float = 0.001,
) -> tuple[GlmParams, np.ndarray]:
    """History-free truth driven by a slow shared covariate.

    Fitting a history-only model to this data (covariate omitted) absorbs
    the drive's autocorrelation into a long positive history filter, a
    classic route to spurious self-excitation: the ML fit free-runs away
    while the data itself is perfectly stationary.

    Returns the generating parameters and the log-rate drive series; pass
    the drive as the stimulus when sampling, then drop it before fitting.
    """
    t = np.arange(t_bins) * dt
    drive = drive_amplitude * np.sin(2.0 * math.pi * drive_freq_hz * t)
    truth = GlmParams(
        math.log(base_rate_hz), np.empty(0), stimulus_filter=np.array([1.0])
    )
    return truth, drive


UNSTABLE_DT = 0.001
UNSTABLE_T_BINS = 1000
UNSTABLE_N_TRIALS = 40
UNSTABLE_FIT_HISTORY_BINS = 40
