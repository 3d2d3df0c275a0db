"""Fit / evaluate / experiment / shift orchestration used by the CLI."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibrators import (
    CalibratorSpec,
    HistogramBinningModel,
    Method,
    ParametricModel,
    fit_histogram_binning,
    load_model,
    save_model,
)
from .data import SAMPLE_FIELDS, FeatureSubset, SampleSet, split_train_test
from .inference import MlConfig, PriorSpec, SviConfig, fit_ml, fit_svi
from .metrics import (
    SHIFT_COLUMNS,
    BinningScheme,
    d_ece_samples,
    evaluate,
    nearest_rank_percentile,
    shift_report,
)
from .uncertainty import DEFAULT_T, DEFAULT_TAU, predict_intervals

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


ESTIMATORS = ("ml", "svi", "both")


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple[Method, ...] = (Method.HISTOGRAM, Method.LOGISTIC, Method.BETA)
    subsets: tuple[FeatureSubset, ...] = tuple(FeatureSubset)
    estimator: str = "both"
    repeats: int = 20
    train_fraction: float = 0.7
    seed: int = 0
    tau: float = DEFAULT_TAU
    samples_t: int = DEFAULT_T
    epsilon: float = 1e-7
    ml: MlConfig = field(default_factory=MlConfig)
    svi: SviConfig = field(default_factory=SviConfig)
    min_samples_per_bin: int = 8
    bins: dict[str, tuple[int, ...]] = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method.parse(m) for m in self.methods))
        object.__setattr__(self, "subsets", tuple(FeatureSubset.parse(s) for s in self.subsets))
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.samples_t < 2:
            raise ConfigError("samples_t must be at least 2")
        for key in self.bins:
            FeatureSubset.parse(key)

    @property
    def estimators(self) -> tuple[str, ...]:
        return ("ml", "svi") if self.estimator == "both" else (self.estimator,)

    def scheme(self, subset: FeatureSubset) -> BinningScheme:
        subset = FeatureSubset.parse(subset)
        bins = self.bins.get(subset.value) or self.bins.get(subset.name)
        if bins is None:
            return BinningScheme.default(subset, self.min_samples_per_bin)
        return BinningScheme(subset.fields, tuple(bins), self.min_samples_per_bin)

    def to_dict(self) -> dict:
        return {
            "methods": [m.short for m in self.methods],
            "subsets": [s.value for s in self.subsets],
            "estimator": self.estimator,
            "repeats": self.repeats,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "tau": self.tau,
            "samples_t": self.samples_t,
            "epsilon": self.epsilon,
            "ml": dataclasses.asdict(self.ml),
            "svi": dataclasses.asdict(self.svi),
            "min_samples_per_bin": self.min_samples_per_bin,
            "bins": {s.value: list(self.scheme(s).bins_per_dim) for s in self.subsets},
        }


def _section(d: dict, name: str) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Build a config from an optional TOML file plus keyword overrides.

    Overrides equal to ``None`` are ignored, so argparse namespaces can be
    passed through directly.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    flat.update(_section(raw, "experiment"))
    for k, v in overrides.items():
        if v is not None:
            flat[k] = v
    try:
        prior = PriorSpec(**_section(raw, "prior"))
        svi_kw = dict(_section(raw, "svi"))
        svi_kw.setdefault("seed", flat.get("seed", 0))
        ml_kw = dict(_section(raw, "ml"))
        scheme = dict(_section(raw, "scheme"))
        min_samples = int(scheme.pop("min_samples_per_bin", flat.pop("min_samples_per_bin", 8)))
        known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"ml", "svi", "bins", "min_samples_per_bin"}
        unknown = set(flat) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(
            ml=MlConfig(**ml_kw),
            svi=SviConfig(prior=prior, **svi_kw),
            min_samples_per_bin=min_samples,
            bins={k: tuple(v) for k, v in scheme.items()},
            **flat,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------
# output helpers


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_json(path, obj) -> None:
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    write_text_atomic(path, buf.getvalue())


def _model_name(spec: CalibratorSpec, estimator: str) -> str:
    return f"{spec.method.short}_{spec.subset.value}_{estimator}"


# --------------------------------------------------------------------------
# fitting


def fit_one(train: SampleSet, spec: CalibratorSpec, estimator: str, cfg: ExperimentConfig, seed: int | None = None):
    scheme = cfg.scheme(spec.subset)
    if spec.method is Method.HISTOGRAM:
        return fit_histogram_binning(train, spec, scheme)
    if estimator == "ml":
        return ParametricModel(spec, fit_ml(train, spec, cfg.ml), "ml", None, scheme)
    svi_cfg = cfg.svi if seed is None else dataclasses.replace(cfg.svi, seed=seed)
    q = fit_svi(train, spec, svi_cfg)
    return ParametricModel(spec, q.mean_weights(), "svi", q, scheme)


def model_pairs(cfg: ExperimentConfig) -> list[tuple[CalibratorSpec, str]]:
    """All (spec, estimator) pairs; histogram binning has a single estimator."""
    pairs = []
    for method in cfg.methods:
        for subset in cfg.subsets:
            spec = CalibratorSpec(method, subset, cfg.epsilon)
            ests = ("hb",) if method is Method.HISTOGRAM else cfg.estimators
            pairs.extend((spec, e) for e in ests)
    return pairs


def cmd_fit(cfg: ExperimentConfig, train: SampleSet, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for spec, est in model_pairs(cfg):
        model = fit_one(train, spec, est, cfg)
        path = out_dir / f"{_model_name(spec, est)}.json"
        save_model(model, path)
        paths.append(path)
    write_json(out_dir / "config.json", cfg.to_dict())
    return paths


# --------------------------------------------------------------------------
# evaluation


def _check_model_scheme(model, scheme: BinningScheme) -> None:
    if tuple(scheme.dims) != model.spec.subset.fields:
        raise ConfigError(f"scheme dims {scheme.dims} do not match model subset {model.spec.subset.value}")


def evaluate_model(model, test: SampleSet, cfg: ExperimentConfig, seed: int) -> dict:
    scheme = cfg.scheme(model.spec.subset)
    _check_model_scheme(model, scheme)
    posterior = getattr(model, "posterior", None)
    batch = None
    if posterior is not None:
        batch = predict_intervals(test, model.spec, posterior, cfg.samples_t, cfg.tau, seed)
        rep = evaluate(test, batch.q_mean, scheme, (batch.lower, batch.upper), cfg.tau)
    else:
        rep = evaluate(test, model.predict(test), scheme)
    est = "hb" if isinstance(model, HistogramBinningModel) else model.estimator
    return {
        "method": model.spec.method.short,
        "subset": model.spec.subset.value,
        "estimator": est,
        "d_ece": rep.d_ece,
        "picp": rep.picp,
        "mpiw": rep.mpiw,
        "n_samples": rep.n_samples,
        "n_valid_bins": rep.n_valid_bins,
        "report": rep,
        "batch": batch,
    }


def baseline_rows(test: SampleSet, cfg: ExperimentConfig) -> list[dict]:
    return [
        {
            "method": "baseline",
            "subset": s.value,
            "estimator": "none",
            "d_ece": d_ece_samples(test, cfg.scheme(s)),
            "picp": None,
            "mpiw": None,
        }
        for s in cfg.subsets
    ]


def cmd_eval(cfg: ExperimentConfig, test: SampleSet, model_paths: Sequence, out_dir) -> dict:
    """Evaluate saved models on ``test``; writes one report per model plus a summary."""
    out_dir = Path(out_dir)
    rows = baseline_rows(test, cfg)
    for path in model_paths:
        model = load_model(path)
        row = evaluate_model(model, test, cfg, cfg.seed)
        rep = row.pop("report")
        batch = row.pop("batch")
        write_json(out_dir / f"report_{Path(path).stem}.json", rep.to_dict())
        if batch is not None:
            _prediction_csv(out_dir / f"predictions_{Path(path).stem}.csv", test, batch)
        rows.append(row)
    summary = {"config": cfg.to_dict(), "rows": rows, "deltas": _svi_deltas(rows)}
    write_json(out_dir / "eval_summary.json", summary)
    return summary


PREDICTION_COLUMNS = ("image_id",) + SAMPLE_FIELDS + ("matched", "q_mean", "ci_low", "ci_high", "ci_width", "tau")


def _prediction_csv(path, test: SampleSet, batch) -> None:
    cols = [test.image_ids] + [test.column(f) for f in SAMPLE_FIELDS] + [test.matched]
    cols += [batch.q_mean, batch.lower, batch.upper, batch.width, [batch.tau] * len(test)]
    write_csv(path, PREDICTION_COLUMNS, zip(*cols))


def _svi_deltas(rows: Sequence[dict]) -> list[dict]:
    """Signed D-ECE difference SVI - ML for each (method, subset)."""
    ml = {(r["method"], r["subset"]): r["d_ece"] for r in rows if r["estimator"] == "ml"}
    out = []
    for r in rows:
        key = (r["method"], r["subset"])
        if r["estimator"] == "svi" and key in ml:
            out.append({"method": key[0], "subset": key[1], "d_ece_delta": r["d_ece"] - ml[key]})
    return out


# --------------------------------------------------------------------------
# experiment protocol


def run_repeat(samples: SampleSet, cfg: ExperimentConfig, repeat: int) -> list[dict]:
    seed = cfg.seed + repeat
    train, test = split_train_test(samples, cfg.train_fraction, seed)
    rows = baseline_rows(test, cfg)
    for spec, est in model_pairs(cfg):
        model = fit_one(train, spec, est, cfg, seed=seed)
        row = evaluate_model(model, test, cfg, seed)
        row.pop("report")
        row.pop("batch")
        rows.append(row)
    for r in rows:
        r["repeat"] = repeat
        r["seed"] = seed
    return rows


def _std(values: Sequence[float]) -> float:
    return float(np.std(values)) if len(values) > 1 else 0.0


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean and population std over repeats for each (method, subset, estimator)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["subset"], r["estimator"]), []).append(r)
    out = []
    for (method, subset, est), rs in groups.items():
        entry = {"method": method, "subset": subset, "estimator": est, "n_repeats": len(rs)}
        for metric in ("d_ece", "picp", "mpiw"):
            vals = [r[metric] for r in rs if r[metric] is not None]
            entry[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{metric}_std"] = _std(vals) if vals else None
        out.append(entry)
    return out


_METHOD_ORDER = {"baseline": 0, "HB": 1, "LC": 2, "BC": 3}
_EST_ORDER = {"none": 0, "hb": 1, "ml": 2, "svi": 3}


def _row_key(r: dict):
    subsets = [s.value for s in FeatureSubset]
    return (r.get("repeat", 0), _METHOD_ORDER[r["method"]], subsets.index(r["subset"]), _EST_ORDER[r["estimator"]])


def _fmt_pct(v: float | None) -> str:
    return "" if v is None else f"{100.0 * v:.3f}"


def _tables(agg: Sequence[dict], cfg: ExperimentConfig) -> tuple[list[list[str]], list[list[str]]]:
    """D-ECE table (ML with signed SVI delta) and PICP/MPIW table, both in percent."""
    by = {(a["method"], a["subset"], a["estimator"]): a for a in agg}
    subsets = [s.value for s in cfg.subsets]
    dece = []
    for method in ["baseline"] + [m.short for m in cfg.methods]:
        row = [method]
        for s in subsets:
            if method == "baseline":
                row.append(_fmt_pct(by[(method, s, "none")]["d_ece_mean"]))
            elif method == "HB":
                row.append(_fmt_pct(by[(method, s, "hb")]["d_ece_mean"]))
            else:
                ml = by.get((method, s, "ml"))
                svi = by.get((method, s, "svi"))
                cell = _fmt_pct((ml or svi)["d_ece_mean"])
                if ml and svi:
                    cell += f" {100.0 * (svi['d_ece_mean'] - ml['d_ece_mean']):+.3f}"
                row.append(cell)
        dece.append(row)
    unc = []
    for metric in ("picp", "mpiw"):
        for method in [m.short for m in cfg.methods if m is not Method.HISTOGRAM]:
            a = [by.get((method, s, "svi")) for s in subsets]
            if all(x is None for x in a):
                continue
            unc.append([metric.upper(), method] + [_fmt_pct(x[f"{metric}_mean"]) if x else "" for x in a])
    return dece, unc


def cmd_experiment(cfg: ExperimentConfig, samples: SampleSet, out_dir=None) -> dict:
    """Run the repeated split -> fit -> evaluate protocol."""
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            per_repeat = list(pool.map(run_repeat, [samples] * cfg.repeats, [cfg] * cfg.repeats, range(cfg.repeats)))
    else:
        per_repeat = [run_repeat(samples, cfg, r) for r in range(cfg.repeats)]
    rows = sorted((r for rs in per_repeat for r in rs), key=_row_key)
    agg = sorted(aggregate(rows), key=_row_key)
    result = {"config": cfg.to_dict(), "n_samples": len(samples), "aggregate": agg, "per_repeat": rows}
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_json(out_dir / "aggregate.json", result)
        write_json(out_dir / "config.json", cfg.to_dict())
        cols = ("repeat", "seed", "method", "subset", "estimator", "d_ece", "picp", "mpiw")
        write_csv(out_dir / "per_repeat.csv", cols, ([r[c] for c in cols] for r in rows))
        dece, unc = _tables(agg, cfg)
        write_csv(out_dir / "table_dece.csv", ["method"] + [s.value for s in cfg.subsets], dece)
        write_csv(out_dir / "table_picp_mpiw.csv", ["metric", "method"] + [s.value for s in cfg.subsets], unc)
    return result


# --------------------------------------------------------------------------
# covariate shift


def _shift_rows_csv(path, rows) -> None:
    write_csv(path, SHIFT_COLUMNS, ([getattr(r, c) for c in SHIFT_COLUMNS] for r in rows))


def cmd_shift(
    cfg: ExperimentConfig,
    model: ParametricModel,
    in_set: SampleSet,
    out_set: SampleSet,
    out_dir=None,
    percentiles: Sequence[int] = (25, 50, 75),
) -> dict:
    """Interval widths of a Bayesian model on its training distribution vs. a shifted set.

    Width thresholds come from the in-distribution percentiles; a shifted
    detection is flagged in-distribution for percentile p when its width does
    not exceed that threshold.
    """
    if getattr(model, "posterior", None) is None:
        raise ConfigError("shift analysis needs a model fitted with SVI")
    scheme = cfg.scheme(model.spec.subset)
    _check_model_scheme(model, scheme)
    b_in = predict_intervals(in_set, model.spec, model.posterior, cfg.samples_t, cfg.tau, cfg.seed)
    b_out = predict_intervals(out_set, model.spec, model.posterior, cfg.samples_t, cfg.tau, cfg.seed)
    rows_in, sum_in = shift_report(b_in.q_mean, b_in.lower, b_in.upper, in_set, scheme, percentiles)
    thresholds = {int(p): v for p, v in zip(percentiles, (nearest_rank_percentile(b_in.width, p) for p in percentiles))}
    rows_out, sum_out = shift_report(b_out.q_mean, b_out.lower, b_out.upper, out_set, scheme, percentiles, thresholds)

    combined = [r for r in rows_in + rows_out if r.abs_gap is not None]
    rho = None
    if len(combined) >= 2:
        w = [r.ci_width for r in combined]
        g = [r.abs_gap for r in combined]
        if np.ptp(w) > 0 and np.ptp(g) > 0:
            rho = float(spearmanr(w, g).statistic)
    med_in, med_out = sum_in["median_width"], sum_out["median_width"]
    frac_out = {str(p): float(np.mean([not r.in_distribution[p] for r in rows_out])) for p in thresholds}
    summary = {
        "in_distribution": sum_in,
        "shifted": sum_out,
        "median_width_ratio": (med_out / med_in) if med_in > 0 else (math.inf if med_out > 0 else 1.0),
        "rank_correlation_combined": rho,
        "fraction_shifted_above_threshold": frac_out,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        _shift_rows_csv(out_dir / "shift_in.csv", rows_in)
        _shift_rows_csv(out_dir / "shift_out.csv", rows_out)
        summary_json = dict(summary)
        if not math.isfinite(summary_json["median_width_ratio"]):
            summary_json["median_width_ratio"] = None
        write_json(out_dir / "shift_summary.json", summary_json)
        write_json(out_dir / "config.json", cfg.to_dict())
    return summary
