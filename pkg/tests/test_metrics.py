import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayescal.data import FeatureSubset
from bayescal.metrics import (
    BinningScheme,
    InsufficientSamplesError,
    PrecisionEstimate,
    assign_bins,
    d_ece,
    d_ece_samples,
    estimate_precision_per_sample,
    evaluate,
    mpiw,
    nearest_rank_percentile,
    picp,
    reliability_table,
    shift_report,
)
from bayescal.synthetic import SyntheticSpec, generate
from bayescal.uncertainty import PredictionInterval

from conftest import make_samples, random_samples


def reference_d_ece(rows, dims, bins, min_count):
    """Nested-loop D-ECE over plain python rows (dicts)."""
    cells = {}
    for r in rows:
        key = []
        for d, m in zip(dims, bins):
            j = int(r[d] * m)
            key.append(m - 1 if j >= m else j)
        cells.setdefault(tuple(key), []).append(r)
    total, n_valid = 0.0, 0
    for members in cells.values():
        if len(members) < min_count:
            continue
        conf = sum(r["score"] for r in members) / len(members)
        prec = sum(r["matched"] for r in members) / len(members)
        total += len(members) * abs(conf - prec)
        n_valid += len(members)
    if n_valid == 0:
        raise ValueError("no valid bins")
    return total / n_valid


def rows_of(s):
    return [{"score": x.score, "cx": x.cx, "cy": x.cy, "w": x.w, "h": x.h, "matched": x.matched} for x in s]


class TestBinning:
    def test_edges(self):
        sc = BinningScheme(("score",), (20,))
        assert list(sc.bin_index(np.array([0.999, 1.0, 0.0, 0.05, 0.0499999]))) == [19, 19, 0, 1, 0]

    def test_defaults(self):
        assert BinningScheme.default(FeatureSubset.CONF_ONLY).bins_per_dim == (20,)
        assert BinningScheme.default(FeatureSubset.CONF_POS).bins_per_dim == (8, 8, 8)
        assert BinningScheme.default(FeatureSubset.CONF_SHAPE).dims == ("score", "w", "h")
        assert BinningScheme.default(FeatureSubset.FULL).n_bins == 5**5
        assert BinningScheme.default(FeatureSubset.FULL).min_samples_per_bin == 8

    def test_uniform_counts_multinomial(self):
        s = make_samples(np.random.default_rng(8).random(1000), np.zeros(1000, dtype=int))
        stats = assign_bins(s, BinningScheme(("score",), (20,)))
        sd = math.sqrt(1000 * 0.05 * 0.95)
        assert all(abs(b.count - 50) <= 4 * sd for b in stats)

    @given(st.integers(0, 2**32 - 1))
    def test_exhaustive(self, seed):
        s = random_samples(200, seed)
        stats = assign_bins(s, BinningScheme.default(FeatureSubset.CONF_POS))
        assert sum(b.count for b in stats) == 200
        assert len(stats) == 512

    def test_empty(self):
        with pytest.raises(ValueError):
            assign_bins(random_samples(3).subset([]), BinningScheme(("score",), (5,)))


class TestDece:
    def test_perfect(self):
        s = make_samples([0.5] * 10, [1, 0] * 5)
        assert d_ece(assign_bins(s, BinningScheme(("score",), (20,)))) == 0.0

    def test_single_bin(self):
        s = make_samples([0.8] * 10, [1] * 5 + [0] * 5)
        assert d_ece(assign_bins(s, BinningScheme(("score",), (20,)))) == pytest.approx(0.3, abs=1e-15)

    def test_too_few(self):
        s = make_samples([0.1 * i for i in range(7)], [1, 0, 1, 0, 1, 0, 1])
        with pytest.raises(InsufficientSamplesError, match="insufficient samples for D-ECE"):
            d_ece(assign_bins(s, BinningScheme(("score",), (1,))))
        with pytest.raises(InsufficientSamplesError):
            d_ece_samples(s, BinningScheme(("score",), (1,)))

    def test_sparse_bins_dropped_and_renormalized(self):
        # 8 samples at gap 0.3 plus 3 samples in a sparse bin with a huge gap
        s = make_samples([0.8] * 8 + [0.05] * 3, [1] * 4 + [0] * 4 + [1] * 3)
        assert d_ece_samples(s, BinningScheme(("score",), (20,))) == pytest.approx(0.3, abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(list(FeatureSubset)))
    def test_reference(self, seed, subset):
        rng = np.random.default_rng(seed)
        s = random_samples(int(rng.integers(30, 600)), seed)
        sc = BinningScheme(subset.fields, tuple(int(x) for x in rng.integers(1, 6, len(subset.fields))),
                           int(rng.integers(1, 12)))
        try:
            ref = reference_d_ece(rows_of(s), sc.dims, sc.bins_per_dim, sc.min_samples_per_bin)
        except ValueError:
            with pytest.raises(InsufficientSamplesError):
                d_ece(assign_bins(s, sc))
            return
        assert d_ece(assign_bins(s, sc)) == pytest.approx(ref, abs=1e-12)
        assert d_ece_samples(s, sc) == pytest.approx(ref, abs=1e-12)

    def test_permutation_invariant(self, rng):
        s = random_samples(500)
        sc = BinningScheme.default(FeatureSubset.CONF_SHAPE, 2)
        assert d_ece_samples(s, sc) == pytest.approx(d_ece_samples(s.subset(rng.permutation(500)), sc), abs=1e-15)


class TestPrecision:
    def test_one_bin(self):
        s = make_samples([0.2, 0.4, 0.6, 0.8], [1, 1, 0, 1])
        est = estimate_precision_per_sample(s, BinningScheme(("score",), (1,), 1))
        assert list(est.values) == [0.75] * 4 and est.included.all()

    def test_all_matched(self):
        s = make_samples(np.linspace(0, 1, 50), np.ones(50, dtype=int))
        est = estimate_precision_per_sample(s, BinningScheme(("score",), (4,)))
        assert np.all(est.values[est.included] == 1.0)

    def test_sparse_excluded(self):
        s = make_samples([0.1] * 7 + [0.9] * 8, [1] * 15)
        est = estimate_precision_per_sample(s, BinningScheme(("score",), (2,)))
        assert list(est.included) == [False] * 7 + [True] * 8

    def test_all_sparse(self):
        with pytest.raises(InsufficientSamplesError):
            estimate_precision_per_sample(make_samples([0.5] * 3, [1, 0, 1]), BinningScheme(("score",), (2,)))


class TestPicpMpiw:
    def test_full(self):
        iv = [PredictionInterval(0.0, 1.0, 0.05)] * 4
        assert picp(iv, [0.1, 0.5, 0.9, 1.0]) == 1.0

    def test_degenerate(self):
        q = [0.2, 0.4, 0.6]
        iv = [PredictionInterval(x, x, 0.05) for x in q]
        assert picp(iv, [0.3, 0.5, 0.7]) == 0.0

    def test_fixture(self):
        iv = [PredictionInterval(a, b, 0.05) for a, b in
              [(0.1, 0.3), (0.4, 0.6), (0.5, 0.9), (0.2, 0.25), (0.7, 0.8)]]
        prec = [0.2, 0.65, 0.5, 0.3, 0.8]  # covered: 1st, 3rd (edge), 5th (edge)
        assert picp(iv, prec) == pytest.approx(0.6)

    def test_exclusion(self):
        iv = np.array([[0.0, 0.1], [0.0, 0.1], [0.4, 0.6]])
        est = PrecisionEstimate(np.array([0.05, np.nan, 0.9]), np.array([True, False, True]))
        assert picp(iv, est) == 0.5

    def test_alignment(self):
        with pytest.raises(ValueError):
            picp(np.array([[0.0, 1.0]]), [0.5, 0.5])

    @given(st.integers(0, 2**32 - 1), st.floats(0, 0.3))
    def test_widening_never_decreases(self, seed, grow):
        rng = np.random.default_rng(seed)
        c = rng.random(50)
        half = rng.random(50) * 0.2
        p = rng.random(50)
        narrow = picp((c - half, c + half), p)
        wide = picp((c - half - grow, c + half + grow), p)
        assert 0.0 <= narrow <= wide <= 1.0

    def test_mpiw(self):
        assert mpiw([PredictionInterval(0.3, 0.3, 0.05)] * 3) == 0.0
        assert mpiw([PredictionInterval(0.1, 0.2, 0.05), PredictionInterval(0.4, 0.7, 0.05)]) == pytest.approx(0.2)
        with pytest.raises(ValueError):
            mpiw([])

    def test_mpiw_reordered_sum(self, rng):
        lo = rng.random(1000) * 0.5
        hi = lo + rng.random(1000) * 0.5
        ref = math.fsum((hi - lo)[::-1]) / 1000
        assert mpiw((lo, hi)) == pytest.approx(ref, abs=1e-12)


class TestReliability:
    def test_rows(self):
        s = make_samples([0.05] * 10 + [0.95] * 3, [0] * 10 + [1] * 3)
        rows = reliability_table(assign_bins(s, BinningScheme(("score",), (4,))))
        assert len(rows) == 4
        assert rows[1] == {"bin": [1], "count": 0, "mean_confidence": None, "precision": None,
                           "gap": None, "valid": False}
        assert rows[0]["valid"] and not rows[3]["valid"] and rows[3]["count"] == 3

    def test_perfect_calibration_within_binomial(self):
        s = generate(SyntheticSpec(50_000, seed=3))
        for r in reliability_table(assign_bins(s, BinningScheme(("score",), (20,)))):
            if r["count"] >= 30:
                p = r["mean_confidence"]
                assert r["gap"] <= 3 * math.sqrt(p * (1 - p) / r["count"]) + 2e-3

    def test_row_count(self):
        rows = reliability_table(assign_bins(random_samples(50), BinningScheme.default(FeatureSubset.FULL)))
        assert len(rows) == 3125


class TestEvaluate:
    def test_report(self):
        s = random_samples(400, seed=1)
        sc = BinningScheme.default(FeatureSubset.CONF_ONLY)
        q = np.clip(s.column("score") * 0.9, 0, 1)
        rep = evaluate(s, q, sc, (q - 0.1, q + 0.1), 0.05)
        d = rep.to_dict()
        assert set(d) == {"d_ece", "picp", "mpiw", "tau", "n_samples", "n_valid_bins", "scheme", "reliability"}
        assert d["mpiw"] == pytest.approx(0.2)
        assert d["d_ece"] == pytest.approx(d_ece_samples(s.with_scores(q), sc))
        assert 0 <= d["picp"] <= 1 and d["n_samples"] == 400


class TestShift:
    scheme = BinningScheme(("score",), (1,), 1)

    def test_equal_widths(self):
        s = make_samples([0.5] * 6, [1, 0, 1, 0, 1, 1])
        q = np.full(6, 0.5)
        _, summary = shift_report(q, q - 0.1, q + 0.1, s, self.scheme)
        assert all(v == pytest.approx(0.2) for v in summary["width_percentiles"].values())
        assert summary["rank_correlation"] is None  # constant widths carry no ranking

    def test_monotone_fixture(self):
        # one bin with precision 0.5; q moves away from 0.5 as width grows
        s = make_samples([0.5] * 6, [1, 0, 1, 0, 1, 0])
        q = np.array([0.5, 0.55, 0.6, 0.65, 0.7, 0.75])
        width = np.array([0.01, 0.02, 0.03, 0.04, 0.05, 0.06])
        rows, summary = shift_report(q, q - width / 2, q + width / 2, s, self.scheme)
        assert summary["rank_correlation"] == pytest.approx(1.0)
        assert [r.abs_gap for r in rows] == pytest.approx([0, 0.05, 0.1, 0.15, 0.2, 0.25])
        assert summary["width_percentiles"] == {"25": pytest.approx(0.02), "50": pytest.approx(0.03),
                                                "75": pytest.approx(0.05)}

    def test_in_distribution_flags(self):
        s = make_samples([0.5] * 4, [1, 0, 1, 0])
        q = np.full(4, 0.5)
        w = np.array([0.1, 0.2, 0.3, 0.4])
        rows, _ = shift_report(q, q - w / 2, q + w / 2, s, self.scheme, thresholds={50: 0.25})
        assert [r.in_distribution[50] for r in rows] == [True, True, False, False]

    def test_nearest_rank(self):
        v = [15, 20, 35, 40, 50]
        assert [nearest_rank_percentile(v, p) for p in (5, 30, 40, 50, 100)] == [15, 20, 20, 35, 50]
        with pytest.raises(ValueError):
            nearest_rank_percentile([], 50)
