"""Posterior predictive samples, mean estimates and highest density intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibrators import CalibratorSpec, build_features, feature_matrix, sigmoid
from .data import MatchedSample, SampleSet
from .inference import VariationalPosterior, sample_weight_matrix

DEFAULT_T = 1000
DEFAULT_TAU = 0.05
# windows whose widths differ by less than this count as tied
HDI_TIE_TOL = 1e-12


@dataclass(frozen=True)
class PredictiveDistribution:
    values: np.ndarray
    index: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class PredictionInterval:
    lower: float
    upper: float
    tau: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


def predict_distribution(
    sample: MatchedSample,
    spec: CalibratorSpec,
    q: VariationalPosterior,
    t: int = DEFAULT_T,
    seed: int = 0,
    index: int = 0,
) -> PredictiveDistribution:
    """T calibrated confidences for one detection, one per drawn weight set."""
    if t < 2:
        raise ValueError("t must be at least 2")
    thetas = sample_weight_matrix(q, t, seed)
    phi = np.asarray(build_features(sample, spec).values)
    return PredictiveDistribution(_forward_draws(phi[None, :], thetas)[0], index)


def predictive_matrix(
    samples: SampleSet, spec: CalibratorSpec, q: VariationalPosterior, t: int = DEFAULT_T, seed: int = 0
) -> np.ndarray:
    """``(n, t)`` predictive samples; every detection sees the same weight draws."""
    if t < 2:
        raise ValueError("t must be at least 2")
    thetas = sample_weight_matrix(q, t, seed)
    X = feature_matrix(samples, spec)
    return _forward_draws(X, thetas)


def _forward_draws(X: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    return sigmoid(X @ thetas[:, :-1].T + thetas[:, -1])


def mean_estimate(d: PredictiveDistribution) -> float:
    if len(d) == 0:
        raise ValueError("empty predictive distribution")
    return float(np.mean(d.values))


def _window(n: int, tau: float) -> int:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    # round() guards against 0.95 * 1000 = 950.0000000000001
    k = math.ceil(round((1.0 - tau) * n, 9))
    if k < 2:
        raise ValueError(f"T*(1-tau) must be at least 2, got T={n}, tau={tau}")
    return k


def hdi_bounds(values: np.ndarray, tau: float = DEFAULT_TAU) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise HDI of an ``(n, T)`` array: the narrowest window of
    ``ceil((1 - tau) T)`` order statistics, lowest window on ties.

    Widths within ``HDI_TIE_TOL`` of the minimum are treated as ties, so that
    rounding noise in the input (0.3 - 0.1 != 0.2) does not pick the window.
    """
    v = np.sort(np.atleast_2d(values), axis=1)
    n_draws = v.shape[1]
    k = _window(n_draws, tau)
    widths = v[:, k - 1:] - v[:, : n_draws - k + 1]
    tied = widths <= widths.min(axis=1, keepdims=True) + HDI_TIE_TOL
    i = np.argmax(tied, axis=1)  # first tied window == lowest
    rows = np.arange(v.shape[0])
    return v[rows, i], v[rows, i + k - 1]


def hdi(d: PredictiveDistribution, tau: float = DEFAULT_TAU) -> PredictionInterval:
    lo, hi = hdi_bounds(d.values[None, :], tau)
    return PredictionInterval(float(lo[0]), float(hi[0]), tau)


def interval_width(c: PredictionInterval) -> float:
    return c.upper - c.lower


@dataclass(frozen=True)
class PredictionBatch:
    """Per-detection mean estimate and HDI for a whole sample set."""

    q_mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tau: float

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def intervals(self) -> list[PredictionInterval]:
        return [PredictionInterval(float(a), float(b), self.tau) for a, b in zip(self.lower, self.upper)]


def predict_intervals(
    samples: SampleSet,
    spec: CalibratorSpec,
    q: VariationalPosterior,
    t: int = DEFAULT_T,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
    chunk: int = 4096,
) -> PredictionBatch:
    if t < 2:
        raise ValueError("t must be at least 2")
    _window(t, tau)
    thetas = sample_weight_matrix(q, t, seed)
    X = feature_matrix(samples, spec)
    n = len(X)
    q_mean, lower, upper = np.empty(n), np.empty(n), np.empty(n)
    for lo in range(0, n, chunk):
        block = _forward_draws(X[lo:lo + chunk], thetas)
        q_mean[lo:lo + chunk] = block.mean(axis=1)
        lower[lo:lo + chunk], upper[lo:lo + chunk] = hdi_bounds(block, tau)
    return PredictionBatch(q_mean, lower, upper, tau)
