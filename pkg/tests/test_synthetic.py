import math

import numpy as np
import pytest
from scipy.special import expit, logit

from bayescal.data import FeatureSubset
from bayescal.metrics import BinningScheme, d_ece_samples
from bayescal.synthetic import SyntheticSpec, generate, true_gap

CONF20 = BinningScheme(("score",), (20,))


def mc_gap(spec, scheme, n=10_000_000, seed=0):
    """Population D-ECE from a large draw, using the true precision (not labels) per bin."""
    rng = np.random.default_rng(seed)
    raw = np.column_stack([rng.beta(spec.score_a, spec.score_b, n)] +
                          [rng.uniform(*spec.region[f], n) for f in ("cx", "cy", "w", "h")])
    pi = spec.true_precision(raw)
    cols = {"score": 0, "cx": 1, "cy": 2, "w": 3, "h": 4}
    idx = scheme.bin_index(raw[:, [cols[d] for d in scheme.dims]])
    cnt = np.bincount(idx, minlength=scheme.n_bins)
    conf = np.bincount(idx, raw[:, 0], minlength=scheme.n_bins)
    prec = np.bincount(idx, pi, minlength=scheme.n_bins)
    return float(np.sum(np.abs(conf - prec)) / n)


class TestGenerate:
    def test_identity_precision(self):
        s = generate(SyntheticSpec(100_000, seed=1))
        sel = (s.column("score") >= 0.69) & (s.column("score") <= 0.71)
        n = sel.sum()
        assert abs(s.matched[sel].mean() - 0.70) <= 3 * math.sqrt(0.21 / n)

    def test_saturated(self):
        assert generate(SyntheticSpec(2000, seed=2, true_bias=40.0)).matched.all()

    def test_deterministic(self):
        spec = SyntheticSpec(500, seed=9, true_weights=(1.0, 0.5), region={"cx": (0.0, 0.5)})
        assert generate(spec) == generate(spec)
        assert generate(spec) != generate(SyntheticSpec(500, seed=10))

    def test_region(self):
        s = generate(SyntheticSpec(3000, seed=3, region={"cx": (0.5, 1.0), "h": (0.1, 0.2)}))
        assert s.column("cx").min() >= 0.5 and s.column("h").max() <= 0.2
        assert s.column("w").min() >= 0.05 and s.column("w").max() <= 0.5

    def test_true_precision_formula(self):
        spec = SyntheticSpec(1, true_weights=(2.0, 0.3, 0.0, -0.5), true_bias=-1.0)
        raw = np.array([[0.8, 0.3, 0.5, 0.2, 0.4]])
        z = 2 * logit(0.8) + 0.3 * logit(0.3) - 0.5 * logit(0.2) - 1.0
        assert spec.true_precision(raw)[0] == pytest.approx(expit(z), rel=1e-12)

    def test_knots(self):
        spec = SyntheticSpec(10, knots=((0.0, 0.1), (0.5, 0.3), (1.0, 0.9)))
        assert spec.true_precision(np.array([[0.75, 0, 0, 0.1, 0.1]]))[0] == pytest.approx(0.6)

    def test_empirical_bin_precision_converges(self):
        spec = SyntheticSpec(100_000, seed=6, true_weights=(2.0,), true_bias=-1.0)
        s = generate(spec)
        idx = CONF20.sample_index(s)
        pi = spec.true_precision(s.columns(("score", "cx", "cy", "w", "h")))
        for b in np.unique(idx):
            sel = idx == b
            if sel.sum() < 100:
                continue
            p = pi[sel].mean()
            assert abs(s.matched[sel].mean() - p) <= 4 * math.sqrt(p * (1 - p) / sel.sum())

    @pytest.mark.parametrize("kwargs", [
        {"n": 0},
        {"n": 5, "score_a": 0.0},
        {"n": 5, "true_weights": ()},
        {"n": 5, "true_weights": (1, 2, 3, 4, 5, 6)},
        {"n": 5, "region": {"cx": (0.6, 0.4)}},
        {"n": 5, "region": {"zz": (0.0, 1.0)}},
        {"n": 5, "knots": ((0.5, 0.1), (0.2, 0.3))},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticSpec(**kwargs)


class TestTrueGap:
    def test_identity_is_zero(self):
        assert true_gap(SyntheticSpec(1), CONF20) == pytest.approx(0.0, abs=1e-12)

    def test_shifted_uniform_against_monte_carlo(self):
        spec = SyntheticSpec(1, score_a=1.0, score_b=1.0, true_bias=-1.0)
        g = true_gap(spec, CONF20)
        assert g > 0.1
        assert g == pytest.approx(mc_gap(spec, CONF20), abs=1e-3)

    def test_box_dependent_against_monte_carlo(self):
        spec = SyntheticSpec(1, true_weights=(1.5, 0.4, 0.0, 0.0, -0.3), true_bias=-0.5,
                             region={"cx": (0.0, 0.5)})
        scheme = BinningScheme.default(FeatureSubset.CONF_POS)
        assert true_gap(spec, scheme) == pytest.approx(mc_gap(spec, scheme, n=4_000_000), abs=1e-3)

    def test_finite_sample_within_noise(self):
        spec = SyntheticSpec(20_000, true_weights=(2.0,), true_bias=-1.0)
        g = true_gap(spec, CONF20)
        vals = [d_ece_samples(generate(SyntheticSpec(20_000, seed=k, true_weights=(2.0,), true_bias=-1.0)), CONF20)
                for k in range(20)]
        sd = np.std(vals, ddof=1)
        assert abs(vals[0] - g) <= 3 * sd + 1e-3
        assert abs(np.mean(vals) - g) <= 3 * sd / math.sqrt(20) + 1e-3

    def test_scheme_must_start_with_score(self):
        with pytest.raises(ValueError):
            true_gap(SyntheticSpec(1), BinningScheme(("cx",), (4,)))
