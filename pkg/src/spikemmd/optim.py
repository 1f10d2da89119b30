"""Fit configuration, per-iteration traces, and the Adam-style stepper."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import ParameterError

if TYPE_CHECKING:
    from .glm import GlmParams

# exponential moving average half-life, in iterations, for the smoothed
# squared-discrepancy trace column
MMD2_EMA_HALFLIFE = 50.0
_EMA_GAMMA = 0.5 ** (1.0 / MMD2_EMA_HALFLIFE)


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters shared by the likelihood and discrepancy optimizers.

    alpha weighs the squared-discrepancy penalty in the joint objective;
    samples_per_step is the number of free-running samples drawn per
    iteration; baseline toggles the score-estimator control variate.
    """

    alpha: float = 0.0
    samples_per_step: int = 100
    learning_rate: float = 0.05
    max_iters: int = 5000
    seed: int = 0
    baseline: bool = True
    lambda_ridge: float = 0.0
    tolerance: float = 1e-6
    grad_clip: float = 1e3
    lr_decay: float = 0.0
    history_bins: int = 10
    stimulus_bins: int = 0
    lam_max: float = 1e6
    eval_samples: int = 1000
    tail_average: int = 0
    trace_stride: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        if self.samples_per_step < 2:
            raise ParameterError(
                f"samples_per_step must be >= 2 for unbiased estimation, "
                f"got {self.samples_per_step}"
            )
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lr_decay < 0:
            raise ParameterError(f"lr_decay must be >= 0, got {self.lr_decay}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.lambda_ridge < 0:
            raise ParameterError(f"lambda_ridge must be >= 0, got {self.lambda_ridge}")
        if self.history_bins < 0 or self.stimulus_bins < 0:
            raise ParameterError("filter lengths must be >= 0")
        if not self.lam_max > 0:
            raise ParameterError(f"lam_max must be positive, got {self.lam_max}")
        if self.eval_samples < 1:
            raise ParameterError(f"eval_samples must be >= 1, got {self.eval_samples}")

    def with_(self, **kwargs) -> "FitConfig":
        return replace(self, **kwargs)


@dataclass
class TraceRecord:
    iteration: int
    nll: float | None
    mmd2_raw: float | None
    mmd2_smoothed: float | None
    grad_norm: float
    n_excluded_samples: int
    wall_ms: float
    params: "GlmParams | None" = None

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "iter": self.iteration,
            "nll": self.nll,
            "mmd2_raw": self.mmd2_raw,
            "mmd2_smoothed": self.mmd2_smoothed,
            "grad_norm": self.grad_norm,
            "n_excluded_samples": self.n_excluded_samples,
            "wall_ms": self.wall_ms,
        }
        if self.params is not None:
            d["params"] = {
                "bias": self.params.bias,
                "history": list(map(float, self.params.history)),
                "stimulus_filter": (
                    None
                    if self.params.stimulus_filter is None
                    else list(map(float, self.params.stimulus_filter))
                ),
            }
        return d


@dataclass
class FitTrace:
    """Per-iteration record of objective values and gradient norms."""

    records: list[TraceRecord] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def append(
        self,
        iteration: int,
        nll: float | None,
        mmd2_raw: float | None,
        grad_norm: float,
        n_excluded: int,
        wall_ms: float,
        params: "GlmParams | None" = None,
    ) -> None:
        if mmd2_raw is None:
            smoothed = None
        elif not self.records or self.records[-1].mmd2_smoothed is None:
            smoothed = float(mmd2_raw)
        else:
            prev = self.records[-1].mmd2_smoothed
            smoothed = _EMA_GAMMA * prev + (1.0 - _EMA_GAMMA) * float(mmd2_raw)
        self.records.append(
            TraceRecord(
                iteration=iteration,
                nll=None if nll is None else float(nll),
                mmd2_raw=None if mmd2_raw is None else float(mmd2_raw),
                mmd2_smoothed=smoothed,
                grad_norm=float(grad_norm),
                n_excluded_samples=int(n_excluded),
                wall_ms=float(wall_ms),
                params=params,
            )
        )

    @property
    def iterations(self) -> int:
        return len(self.records)

    def final_nll(self) -> float | None:
        return self.records[-1].nll if self.records else None

    def final_mmd2(self) -> float | None:
        for rec in reversed(self.records):
            if rec.mmd2_raw is not None:
                return rec.mmd2_raw
        return None

    def mmd2_tail(self, k: int) -> np.ndarray:
        vals = [r.mmd2_raw for r in self.records if r.mmd2_raw is not None]
        return np.asarray(vals[-k:], dtype=np.float64)

    def to_ndjson(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json_dict()) + "\n")


class AdamStepper:
    """Per-parameter step scaling from first and second moment estimates.

    eps_rel adds a scale-free floor to the denominator: components whose
    gradient RMS falls below eps_rel times the strongest component move in
    proportion to their gradient instead of taking full-size normalized
    steps. This suppresses the random walk that pure normalization sustains
    along noise-dominated directions of a stochastic objective.
    """

    def __init__(self, n_params: int, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 eps_rel: float = 0.0):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.eps_rel = eps_rel
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def reset(self) -> None:
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the update to subtract from the parameter vector."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        rms = np.sqrt(v_hat)
        denom = rms + self.eps
        if self.eps_rel > 0.0 and rms.size:
            denom = denom + self.eps_rel * rms.max()
        return self.lr * m_hat / denom


def clip_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale grad down to an L2 norm of max_norm when it exceeds it."""
    if max_norm <= 0 or not math.isfinite(max_norm):
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad
