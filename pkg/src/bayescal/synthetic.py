"""Synthetic detections with a known recalibration map."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from scipy.special import expit

from .calibrators import DEFAULT_EPSILON, logit
from .data import BOX_FIELDS, SAMPLE_FIELDS, SampleSet
from .metrics import BinningScheme


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``true_weights`` act on the logistic feature space of *all* inputs
    ``(score, cx, cy, w, h)`` in that order; trailing weights may be omitted
    and default to zero. If ``knots`` is given, the true precision is instead
    the piecewise-linear interpolation of ``knots`` over the raw score
    (a map outside the logistic family).
    """

    n: int
    seed: int = 0
    score_a: float = 5.0
    score_b: float = 2.0
    true_weights: tuple[float, ...] = (1.0,)
    true_bias: float = 0.0
    region: dict[str, tuple[float, float]] = field(default_factory=dict)
    knots: tuple[tuple[float, float], ...] | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.score_a <= 0 or self.score_b <= 0:
            raise ValueError("score distribution shape parameters must be positive")
        w = tuple(float(x) for x in self.true_weights)
        if not 1 <= len(w) <= 5:
            raise ValueError("true_weights needs between 1 and 5 entries")
        object.__setattr__(self, "true_weights", w + (0.0,) * (5 - len(w)))
        region = {}
        for name in BOX_FIELDS:
            lo, hi = self.region.get(name, (0.0, 1.0) if name in ("cx", "cy") else (0.05, 0.5))
            if not 0.0 <= lo < hi <= 1.0:
                raise ValueError(f"region for {name} must be a non-empty sub-interval of [0, 1]")
            region[name] = (float(lo), float(hi))
        extra = set(self.region) - set(BOX_FIELDS)
        if extra:
            raise ValueError(f"unknown region dimensions {sorted(extra)}")
        object.__setattr__(self, "region", region)
        if self.knots is not None:
            k = np.asarray(self.knots, dtype=np.float64)
            if k.ndim != 2 or k.shape[1] != 2 or np.any(np.diff(k[:, 0]) <= 0):
                raise ValueError("knots must be (x, y) pairs with increasing x")
            if np.any((k < 0) | (k > 1)):
                raise ValueError("knots must lie in [0, 1]^2")
            object.__setattr__(self, "knots", tuple(map(tuple, k)))

    def true_precision(self, raw: np.ndarray) -> np.ndarray:
        """True P(matched) for an ``(n, 5)`` array of (score, cx, cy, w, h)."""
        raw = np.atleast_2d(raw)
        if self.knots is not None:
            k = np.asarray(self.knots)
            return np.interp(raw[:, 0], k[:, 0], k[:, 1])
        z = logit(raw, self.epsilon) @ np.asarray(self.true_weights) + self.true_bias
        return expit(z)


def generate(spec: SyntheticSpec, provenance: str | None = None) -> SampleSet:
    rng = np.random.default_rng(spec.seed)
    score = rng.beta(spec.score_a, spec.score_b, spec.n)
    box = [rng.uniform(*spec.region[name], spec.n) for name in BOX_FIELDS]
    raw = np.column_stack([score, *box])
    matched = (rng.random(spec.n) < spec.true_precision(raw)).astype(np.int8)
    return SampleSet(
        score, *box, matched,
        image_ids=[f"synth-{spec.seed}-{i}" for i in range(spec.n)],
        provenance=provenance or f"synthetic(n={spec.n}, seed={spec.seed})",
    )


def true_gap(spec: SyntheticSpec, scheme: BinningScheme, nodes: int = 24, box_nodes: int = 6) -> float:
    """Population D-ECE of the raw scores against the true precision.

    Integrates bin by bin with tensor-product Gauss-Legendre quadrature over
    the score density and the uniform box region. Sparse-bin neglect does not
    apply to the population.
    """
    dims = list(scheme.dims)
    if dims[0] != "score" or not set(dims) <= set(SAMPLE_FIELDS):
        raise ValueError("scheme must start with 'score' and use sample fields only")
    score_dist = sps.beta(spec.score_a, spec.score_b)

    # per dimension: list of (nodes, weights) per bin, weights carrying the density
    per_dim = []
    for name, nb in zip(dims, scheme.bins_per_dim):
        edges = np.linspace(0.0, 1.0, nb + 1)
        k = nodes if name == "score" else box_nodes
        gx, gw = np.polynomial.legendre.leggauss(k)
        cells = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            if name == "score":
                a, b, dens = lo, hi, None
            else:
                rlo, rhi = spec.region[name]
                a, b = max(lo, rlo), min(hi, rhi)
                dens = 1.0 / (rhi - rlo)
            if b <= a:
                cells.append((np.empty(0), np.empty(0)))
                continue
            x = 0.5 * (b - a) * gx + 0.5 * (a + b)
            wt = 0.5 * (b - a) * gw * (score_dist.pdf(x) if dens is None else dens)
            cells.append((x, wt))
        per_dim.append(cells)

    # box dimensions outside the scheme are integrated over their full region
    others = [f for f in BOX_FIELDS if f not in dims]
    gx, gw = np.polynomial.legendre.leggauss(box_nodes)
    other_nodes = []
    for name in others:
        a, b = spec.region[name]
        other_nodes.append((0.5 * (b - a) * gx + 0.5 * (a + b), 0.5 * gw))  # uniform density * (b-a)/2

    total = 0.0
    for cell in itertools.product(*per_dim):
        if any(len(x) == 0 for x, _ in cell):
            continue
        axes = [x for x, _ in cell] + [x for x, _ in other_nodes]
        wts = [w for _, w in cell] + [w for _, w in other_nodes]
        grids = np.meshgrid(*axes, indexing="ij")
        weight = np.ones_like(grids[0])
        for i, w in enumerate(wts):
            shape = [1] * len(wts)
            shape[i] = len(w)
            weight = weight * w.reshape(shape)
        names = dims + others
        raw = np.column_stack([grids[names.index(f)].ravel() for f in SAMPLE_FIELDS])
        wflat = weight.ravel()
        mass = wflat.sum()
        if mass <= 0:
            continue
        conf = np.dot(wflat, raw[:, 0]) / mass
        prec = np.dot(wflat, spec.true_precision(raw)) / mass
        total += mass * abs(conf - prec)
    return float(total)
