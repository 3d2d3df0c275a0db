"""Multidimensional binning, D-ECE, PICP/MPIW and the covariate-shift report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .data import FeatureSubset, SampleSet

DEFAULT_BINS = {
    FeatureSubset.CONF_ONLY: (20,),
    FeatureSubset.CONF_POS: (8, 8, 8),
    FeatureSubset.CONF_SHAPE: (8, 8, 8),
    FeatureSubset.FULL: (5, 5, 5, 5, 5),
}
MIN_SAMPLES_PER_BIN = 8


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class BinningScheme:
    """Equal-width bins over [0, 1] in every dimension.

    Bins are half-open ``[a, b)`` except the last one per dimension, which also
    holds the value 1.0.
    """

    dims: tuple[str, ...]
    bins_per_dim: tuple[int, ...]
    min_samples_per_bin: int = MIN_SAMPLES_PER_BIN

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "bins_per_dim", tuple(int(b) for b in self.bins_per_dim))
        if len(self.dims) != len(self.bins_per_dim) or not self.dims:
            raise ValueError("dims and bins_per_dim must be non-empty and of equal length")
        if any(b < 1 for b in self.bins_per_dim):
            raise ValueError("bins_per_dim must be positive")
        if self.min_samples_per_bin < 1:
            raise ValueError("min_samples_per_bin must be positive")

    @classmethod
    def default(cls, subset: FeatureSubset, min_samples_per_bin: int = MIN_SAMPLES_PER_BIN) -> "BinningScheme":
        subset = FeatureSubset.parse(subset)
        return cls(subset.fields, DEFAULT_BINS[subset], min_samples_per_bin)

    @property
    def n_bins(self) -> int:
        return math.prod(self.bins_per_dim)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bins_per_dim

    def bin_index(self, values: np.ndarray) -> np.ndarray:
        """Flat (C-order) bin index for each row of an ``(n, ndim)`` array."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != len(self.dims):
            raise ValueError(f"expected {len(self.dims)} columns, got {values.shape[1]}")
        m = np.asarray(self.bins_per_dim)
        idx = np.floor(values * m).astype(np.int64)
        idx = np.clip(idx, 0, m - 1)
        return np.ravel_multi_index(tuple(idx.T), self.bins_per_dim)

    def sample_index(self, samples: SampleSet) -> np.ndarray:
        return self.bin_index(samples.columns(self.dims))

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "bins_per_dim": list(self.bins_per_dim),
            "min_samples_per_bin": self.min_samples_per_bin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinningScheme":
        return cls(tuple(d["dims"]), tuple(d["bins_per_dim"]), int(d.get("min_samples_per_bin", MIN_SAMPLES_PER_BIN)))


@dataclass(frozen=True)
class BinStats:
    index: tuple[int, ...]
    count: int
    mean_confidence: float | None
    precision: float | None
    valid: bool

    @property
    def gap(self) -> float | None:
        if self.count == 0:
            return None
        return abs(self.mean_confidence - self.precision)


@dataclass(frozen=True)
class _BinTotals:
    flat_index: np.ndarray  # per sample
    counts: np.ndarray
    conf_sum: np.ndarray
    hit_sum: np.ndarray
    valid: np.ndarray


def _totals(samples: SampleSet, scheme: BinningScheme) -> _BinTotals:
    if len(samples) == 0:
        raise ValueError("empty sample set")
    flat = scheme.sample_index(samples)
    nb = scheme.n_bins
    counts = np.bincount(flat, minlength=nb)
    conf_sum = np.bincount(flat, weights=samples.column("score"), minlength=nb)
    hit_sum = np.bincount(flat, weights=samples.matched.astype(np.float64), minlength=nb)
    return _BinTotals(flat, counts, conf_sum, hit_sum, counts >= scheme.min_samples_per_bin)


def assign_bins(samples: SampleSet, scheme: BinningScheme) -> list[BinStats]:
    """Per-bin count, mean confidence and precision (one entry per bin).

    The ``score`` column is used as the confidence, so pass calibrated
    samples (see :meth:`SampleSet.with_scores`) to evaluate a calibrator.
    """
    t = _totals(samples, scheme)
    out = []
    for flat in range(scheme.n_bins):
        c = int(t.counts[flat])
        out.append(BinStats(
            index=tuple(int(i) for i in np.unravel_index(flat, scheme.shape)),
            count=c,
            mean_confidence=float(t.conf_sum[flat] / c) if c else None,
            precision=float(t.hit_sum[flat] / c) if c else None,
            valid=bool(t.valid[flat]),
        ))
    return out


def d_ece(stats: Sequence[BinStats]) -> float:
    """Count-weighted mean |confidence - precision| over valid bins."""
    valid = [s for s in stats if s.valid and s.count > 0]
    if not valid:
        raise InsufficientSamplesError("insufficient samples for D-ECE")
    n_valid = sum(s.count for s in valid)
    return float(sum(s.count * abs(s.mean_confidence - s.precision) for s in valid) / n_valid)


def d_ece_samples(samples: SampleSet, scheme: BinningScheme) -> float:
    """Vectorized D-ECE straight from a sample set."""
    t = _totals(samples, scheme)
    if not t.valid.any():
        raise InsufficientSamplesError("insufficient samples for D-ECE")
    c = t.counts[t.valid]
    gap = np.abs(t.conf_sum[t.valid] - t.hit_sum[t.valid]) / c
    return float(np.sum(c * gap) / np.sum(c))


@dataclass(frozen=True)
class PrecisionEstimate:
    """Binned precision per sample; ``included`` is False for samples in sparse bins."""

    values: np.ndarray
    included: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def estimate_precision_per_sample(samples: SampleSet, scheme: BinningScheme) -> PrecisionEstimate:
    t = _totals(samples, scheme)
    ok = t.valid[t.flat_index]
    if not ok.any():
        raise InsufficientSamplesError("all bins hold fewer than "
                                       f"{scheme.min_samples_per_bin} samples")
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = t.hit_sum / t.counts
    values = np.where(ok, prec[t.flat_index], np.nan)
    return PrecisionEstimate(values, ok)


def _interval_arrays(intervals) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(intervals, np.ndarray):
        arr = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]
    if isinstance(intervals, tuple) and len(intervals) == 2 and isinstance(intervals[0], np.ndarray):
        return np.asarray(intervals[0], dtype=np.float64), np.asarray(intervals[1], dtype=np.float64)
    lo = np.array([c.lower for c in intervals], dtype=np.float64)
    hi = np.array([c.upper for c in intervals], dtype=np.float64)
    return lo, hi


def picp(intervals, precisions) -> float:
    """Fraction of included samples whose precision lies inside its interval.

    ``intervals`` is a sequence of objects with ``lower``/``upper``, an
    ``(n, 2)`` array or a ``(lower, upper)`` pair of arrays. ``precisions`` is a
    :class:`PrecisionEstimate` or a plain array (NaN marks exclusion).
    """
    lo, hi = _interval_arrays(intervals)
    if isinstance(precisions, PrecisionEstimate):
        prec, inc = precisions.values, precisions.included
    else:
        prec = np.asarray(precisions, dtype=np.float64)
        inc = np.isfinite(prec)
    if not (len(lo) == len(hi) == len(prec)):
        raise ValueError(f"{len(lo)} intervals but {len(prec)} precision values")
    if not inc.any():
        raise InsufficientSamplesError("no included samples for PICP")
    p = prec[inc]
    covered = (lo[inc] <= p) & (p <= hi[inc])
    return float(np.mean(covered))


def mpiw(intervals) -> float:
    lo, hi = _interval_arrays(intervals)
    if len(lo) == 0:
        raise ValueError("no intervals")
    return float(np.mean(hi - lo))


def reliability_table(stats: Sequence[BinStats]) -> list[dict]:
    return [
        {
            "bin": list(s.index),
            "count": s.count,
            "mean_confidence": s.mean_confidence,
            "precision": s.precision,
            "gap": s.gap,
            "valid": s.valid,
        }
        for s in stats
    ]


@dataclass
class EvaluationReport:
    d_ece: float
    picp: float | None
    mpiw: float | None
    tau: float | None
    reliability: list[BinStats]
    n_samples: int
    n_valid_bins: int
    scheme: BinningScheme

    def to_dict(self) -> dict:
        return {
            "d_ece": self.d_ece,
            "picp": self.picp,
            "mpiw": self.mpiw,
            "tau": self.tau,
            "n_samples": self.n_samples,
            "n_valid_bins": self.n_valid_bins,
            "scheme": self.scheme.to_dict(),
            "reliability": reliability_table(self.reliability),
        }


def evaluate(
    samples: SampleSet,
    confidence,
    scheme: BinningScheme,
    intervals=None,
    tau: float | None = None,
) -> EvaluationReport:
    """D-ECE of ``confidence`` on ``samples`` plus PICP/MPIW when intervals are given."""
    calibrated = samples.with_scores(np.asarray(confidence, dtype=np.float64))
    stats = assign_bins(calibrated, scheme)
    p_cov = width = None
    if intervals is not None:
        p_cov = picp(intervals, estimate_precision_per_sample(calibrated, scheme))
        width = mpiw(intervals)
    return EvaluationReport(
        d_ece=d_ece(stats),
        picp=p_cov,
        mpiw=width,
        tau=tau,
        reliability=stats,
        n_samples=len(samples),
        n_valid_bins=sum(s.valid for s in stats),
        scheme=scheme,
    )


# --------------------------------------------------------------------------
# covariate shift


@dataclass(frozen=True)
class ShiftRow:
    index: int
    q_mean: float
    ci_low: float
    ci_high: float
    ci_width: float
    est_precision: float | None
    abs_gap: float | None
    in_distribution: dict[int, bool] = field(default_factory=dict)


def nearest_rank_percentile(values, pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no values")
    if not 0 <= pct <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    rank = max(1, math.ceil(round(pct / 100.0 * len(v), 9)))
    return float(v[rank - 1])


def shift_report(
    q_mean,
    lower,
    upper,
    samples: SampleSet,
    scheme: BinningScheme,
    percentiles: Sequence[int] = (25, 50, 75),
    thresholds: dict[int, float] | None = None,
) -> tuple[list[ShiftRow], dict]:
    """Per-detection interval width against the binned calibration gap.

    ``thresholds`` maps percentile to width threshold; by default they are the
    nearest-rank percentiles of this set's widths. A detection counts as
    in-distribution for a percentile when its width does not exceed the
    threshold.
    """
    q_mean = np.asarray(q_mean, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    width = upper - lower
    prec = estimate_precision_per_sample(samples.with_scores(q_mean), scheme)
    gap = np.abs(q_mean - prec.values)

    pct_values = {int(p): nearest_rank_percentile(width, p) for p in percentiles}
    if thresholds is None:
        thresholds = pct_values
    rows = []
    for i in range(len(q_mean)):
        inc = bool(prec.included[i])
        rows.append(ShiftRow(
            index=i,
            q_mean=float(q_mean[i]),
            ci_low=float(lower[i]),
            ci_high=float(upper[i]),
            ci_width=float(width[i]),
            est_precision=float(prec.values[i]) if inc else None,
            abs_gap=float(gap[i]) if inc else None,
            in_distribution={p: bool(width[i] <= t) for p, t in thresholds.items()},
        ))

    inc = prec.included
    rho = None
    if inc.sum() >= 2 and np.ptp(width[inc]) > 0 and np.ptp(gap[inc]) > 0:
        rho = float(sps.spearmanr(width[inc], gap[inc]).statistic)
    summary = {
        "n": int(len(q_mean)),
        "n_included": int(inc.sum()),
        "width_percentiles": {str(p): v for p, v in pct_values.items()},
        "median_width": nearest_rank_percentile(width, 50),
        "mean_abs_gap": float(np.mean(gap[inc])) if inc.any() else None,
        "rank_correlation": rho,
    }
    return rows, summary


SHIFT_COLUMNS = ("index", "q_mean", "ci_low", "ci_high", "ci_width", "est_precision", "abs_gap")
