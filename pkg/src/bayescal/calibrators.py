"""Calibration features and maps: logistic, beta and histogram binning."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
import numpy as np
from scipy.special import expit

from .data import FeatureSubset, MatchedSample, SampleSet
from .metrics import BinningScheme

DEFAULT_EPSILON = 1e-7
# forward() output is kept strictly inside (0, 1)
_Q_MIN = 2.0**-53
_Q_MAX = 1.0 - 2.0**-53


class Method(enum.Enum):
    LOGISTIC = "logistic"
    BETA = "beta"
    HISTOGRAM = "histogram"

    @classmethod
    def parse(cls, value: "str | Method") -> "Method":
        if isinstance(value, cls):
            return value
        aliases = {"lc": cls.LOGISTIC, "bc": cls.BETA, "hb": cls.HISTOGRAM}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown calibration method {value!r}") from None

    @property
    def short(self) -> str:
        return {"logistic": "LC", "beta": "BC", "histogram": "HB"}[self.value]


@dataclass(frozen=True)
class CalibratorSpec:
    method: Method
    subset: FeatureSubset = FeatureSubset.CONF_ONLY
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "subset", FeatureSubset.parse(self.subset))
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError(f"epsilon must lie in (0, 1e-3], got {self.epsilon}")

    @property
    def n_features(self) -> int:
        n = len(self.subset.fields)
        if self.method is Method.LOGISTIC:
            return n
        if self.method is Method.BETA:
            return 2 * n
        raise ValueError("histogram binning has no feature vector")


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    method: Method
    subset: FeatureSubset

    def __len__(self) -> int:
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype or np.float64)


@dataclass(frozen=True)
class WeightVector:
    weights: tuple[float, ...]
    bias: float = 0.0

    def __post_init__(self):
        w = tuple(float(x) for x in np.asarray(self.weights, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise ValueError("weights must be finite")

    def __len__(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        """Weights followed by the bias."""
        return np.array(self.weights + (self.bias,))

    @classmethod
    def from_array(cls, theta) -> "WeightVector":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(tuple(theta[:-1]), float(theta[-1]))

    @classmethod
    def identity(cls, spec: CalibratorSpec) -> "WeightVector":
        """Weights reproducing the raw confidence (logistic) or a close analogue (beta)."""
        w = np.zeros(spec.n_features)
        if spec.method is Method.LOGISTIC:
            w[0] = 1.0
        else:
            w[0] = w[1] = 1.0
        return cls(tuple(w), 0.0)


def logit(x, epsilon: float = DEFAULT_EPSILON):
    x = np.clip(x, epsilon, 1.0 - epsilon)
    return np.log(x) - np.log1p(-x)


def _transform(raw: np.ndarray, method: Method, epsilon: float) -> np.ndarray:
    """Map an ``(n, k)`` array of raw inputs in [0, 1] to calibration features."""
    x = np.clip(raw, epsilon, 1.0 - epsilon)
    if method is Method.LOGISTIC:
        return np.log(x) - np.log1p(-x)
    if method is Method.BETA:
        out = np.empty((raw.shape[0], 2 * raw.shape[1]))
        out[:, 0::2] = np.log(x)
        out[:, 1::2] = -np.log1p(-x)
        return out
    raise ValueError(f"{method} has no parametric features")


def build_features(sample: MatchedSample, spec: CalibratorSpec) -> FeatureVector:
    raw = np.array([[getattr(sample, f) for f in spec.subset.fields]], dtype=np.float64)
    vals = _transform(raw, spec.method, spec.epsilon)[0]
    return FeatureVector(tuple(float(v) for v in vals), spec.method, spec.subset)


def feature_matrix(samples: SampleSet, spec: CalibratorSpec) -> np.ndarray:
    """Features for a whole sample set, one row per sample."""
    return _transform(samples.columns(spec.subset.fields), spec.method, spec.epsilon)


def _as_theta(theta) -> tuple[np.ndarray, float]:
    if isinstance(theta, WeightVector):
        return np.asarray(theta.weights), theta.bias
    theta = np.asarray(theta, dtype=np.float64)
    return theta[:-1], float(theta[-1])


def logits(phi, theta) -> np.ndarray:
    w, b = _as_theta(theta)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != len(w):
        raise ValueError(f"feature length {phi.shape[-1]} does not match {len(w)} weights")
    return phi @ w + b


def sigmoid(z):
    """Logistic function clipped to stay strictly inside (0, 1)."""
    return np.clip(expit(z), _Q_MIN, _Q_MAX)


def forward(phi, theta):
    """Calibrated confidence sigmoid(w . phi + b).

    ``phi`` may be a single feature vector or an ``(n, d)`` matrix.
    """
    q = sigmoid(logits(phi, theta))
    return float(q) if q.ndim == 0 else q


def _labels(matched, n: int) -> np.ndarray:
    m = np.asarray(matched, dtype=np.float64).reshape(-1)
    if n == 0:
        raise ValueError("nll needs at least one sample")
    if len(m) != n:
        raise ValueError(f"{n} feature rows but {len(m)} labels")
    return m


def nll(features, matched, theta) -> float:
    """Negative Bernoulli log-likelihood summed over samples."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    m = _labels(matched, X.shape[0])
    z = logits(X, theta)
    # -[m log s(z) + (1-m) log(1-s(z))] == softplus(z) - m z
    return float(np.sum(np.logaddexp(0.0, z) - m * z))


def nll_gradient(features, matched, theta) -> tuple[np.ndarray, float]:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    m = _labels(matched, X.shape[0])
    r = expit(logits(X, theta)) - m
    return X.T @ r, float(np.sum(r))


# --------------------------------------------------------------------------
# histogram binning


@dataclass(frozen=True)
class HistogramBinningModel:
    spec: CalibratorSpec
    scheme: BinningScheme
    values: np.ndarray  # per bin, C-order over scheme.shape
    counts: np.ndarray
    fallback: float

    def predict(self, samples: SampleSet) -> np.ndarray:
        return self.values[self.scheme.sample_index(samples)]


def _check_scheme(spec: CalibratorSpec, scheme: BinningScheme) -> None:
    if tuple(scheme.dims) != spec.subset.fields:
        raise ValueError(
            f"binning dims {scheme.dims} do not match subset {spec.subset.name} {spec.subset.fields}"
        )


def fit_histogram_binning(
    train: SampleSet, spec: CalibratorSpec, scheme: BinningScheme | None = None
) -> HistogramBinningModel:
    if len(train) == 0:
        raise ValueError("empty training set")
    scheme = scheme or BinningScheme.default(spec.subset)
    _check_scheme(spec, scheme)
    flat = scheme.sample_index(train)
    counts = np.bincount(flat, minlength=scheme.n_bins)
    hits = np.bincount(flat, weights=train.matched.astype(np.float64), minlength=scheme.n_bins)
    fallback = float(np.mean(train.matched))
    values = np.full(scheme.n_bins, fallback)
    filled = counts > 0
    values[filled] = hits[filled] / counts[filled]
    values.flags.writeable = False
    return HistogramBinningModel(spec, scheme, values, counts, fallback)


def predict_histogram_binning(model: HistogramBinningModel, sample: MatchedSample) -> float:
    raw = np.array([[getattr(sample, f) for f in model.scheme.dims]])
    return float(model.values[model.scheme.bin_index(raw)[0]])


# --------------------------------------------------------------------------
# serialization


@dataclass(frozen=True)
class ParametricModel:
    """A fitted logistic/beta calibrator, optionally with a variational posterior."""

    spec: CalibratorSpec
    theta: WeightVector
    estimator: str = "ml"
    posterior: object | None = None  # inference.VariationalPosterior
    scheme: BinningScheme | None = None

    def predict(self, samples: SampleSet) -> np.ndarray:
        return forward(feature_matrix(samples, self.spec), self.theta)


def model_to_dict(model) -> dict:
    spec = model.spec
    d = {"method": spec.method.value, "subset": spec.subset.value, "epsilon": spec.epsilon}
    if isinstance(model, HistogramBinningModel):
        d.update({
            "estimator": "hb",
            "bins": [float(v) for v in model.values],
            "counts": [int(c) for c in model.counts],
            "fallback": model.fallback,
            "scheme": model.scheme.to_dict(),
        })
        return d
    d.update({
        "estimator": model.estimator,
        "weights": list(model.theta.weights),
        "bias": model.theta.bias,
        "scheme": model.scheme.to_dict() if model.scheme else None,
    })
    if model.posterior is not None:
        d["posterior"] = model.posterior.to_dict()
    return d


def model_from_dict(d: dict):
    spec = CalibratorSpec(Method.parse(d["method"]), FeatureSubset.parse(d["subset"]), float(d["epsilon"]))
    scheme = BinningScheme.from_dict(d["scheme"]) if d.get("scheme") else None
    if spec.method is Method.HISTOGRAM:
        values = np.array(d["bins"], dtype=np.float64)
        values.flags.writeable = False
        return HistogramBinningModel(spec, scheme, values, np.array(d["counts"]), float(d["fallback"]))
    posterior = None
    if d.get("posterior"):
        from .inference import VariationalPosterior

        posterior = VariationalPosterior.from_dict(d["posterior"])
    return ParametricModel(spec, WeightVector(tuple(d["weights"]), d["bias"]), d.get("estimator", "ml"),
                           posterior, scheme)


def save_model(model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    # json writes floats with repr(), so loading is bit-exact
    tmp.write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

