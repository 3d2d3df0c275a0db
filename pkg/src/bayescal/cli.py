"""Command line interface: ``bayescal {match,synth,fit,eval,experiment,shift}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .calibrators import ParametricModel, load_model
from .data import (
    DataError,
    load_detections,
    load_ground_truth,
    load_samples,
    match_detections,
    save_samples,
)
from .inference import DegenerateLabelsError, NumericalError
from .metrics import InsufficientSamplesError
from .pipeline import ConfigError, cmd_eval, cmd_experiment, cmd_fit, cmd_shift, load_config
from .synthetic import SyntheticSpec, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("bayescal")


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _region(text: str) -> dict[str, tuple[float, float]]:
    """Parse ``cx=0:0.5,w=0.1:0.3``."""
    out = {}
    for part in _csv_list(text):
        try:
            name, rng = part.split("=")
            lo, hi = rng.split(":")
            out[name.strip()] = (float(lo), float(hi))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad region entry {part!r}, expected name=lo:hi") from None
    return out


def _knots(text: str) -> tuple[tuple[float, float], ...]:
    """Parse ``0:0.1,0.5:0.3,1:0.9`` into (score, precision) pairs."""
    try:
        return tuple(tuple(float(v) for v in p.split(":")) for p in _csv_list(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad knots {text!r}, expected x:y,x:y,...") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--out-dir", type=Path, help="output directory")
    common.add_argument("--tau", type=float, help="interval miss mass (default 0.05)")
    common.add_argument("--samples-t", type=int, dest="samples_t", help="predictive draws per detection (default 1000)")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--methods", type=_csv_list, help="comma separated subset of HB,LC,BC")
    model_opts.add_argument("--subsets", type=_csv_list, help="comma separated subset of conf_only,conf_pos,conf_shape,full")
    model_opts.add_argument("--estimator", choices=("ml", "svi", "both"))
    model_opts.add_argument("--jobs", type=int, help="worker processes for repeats")

    p = argparse.ArgumentParser(prog="bayescal", description="Bayesian confidence calibration for object detection")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("match", parents=[common], help="label detections by IoU matching")
    m.add_argument("--dets", type=Path, required=True)
    m.add_argument("--gts", type=Path, required=True)
    m.add_argument("--iou", type=float, default=0.5)
    m.add_argument("--category", type=int, help="keep only detections of this category after matching")
    m.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic labelled detections")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--true-weights", type=_csv_floats, default=(1.0,),
                   help="weights on logit(score),logit(cx),logit(cy),logit(w),logit(h)")
    s.add_argument("--true-bias", type=float, default=0.0)
    s.add_argument("--score-shape", type=_csv_floats, default=(5.0, 2.0), help="Beta shape pair a,b")
    s.add_argument("--region", type=_region, default={}, help="e.g. cx=0:0.5,cy=0:1")
    s.add_argument("--knots", type=_knots, help="piecewise-linear true precision over the score, x:y,...")
    s.add_argument("--out", type=Path, required=True)

    f = sub.add_parser("fit", parents=[common, model_opts], help="fit calibration models")
    f.add_argument("--train", type=Path, required=True)

    e = sub.add_parser("eval", parents=[common], help="evaluate fitted models on a test set")
    e.add_argument("--test", type=Path, required=True)
    e.add_argument("--models", type=Path, nargs="+", required=True)

    x = sub.add_parser("experiment", parents=[common, model_opts], help="repeated split/fit/eval protocol")
    x.add_argument("--samples", type=Path, required=True)
    x.add_argument("--repeats", type=int)
    x.add_argument("--train-fraction", type=float, dest="train_fraction")

    sh = sub.add_parser("shift", parents=[common], help="covariate-shift report for an SVI model")
    sh.add_argument("--model", type=Path, required=True)
    sh.add_argument("--in-samples", type=Path, required=True, dest="in_samples")
    sh.add_argument("--out-samples", type=Path, required=True, dest="out_samples")
    return p


def _config(args):
    keys = ("seed", "tau", "samples_t", "methods", "subsets", "estimator", "jobs", "repeats", "train_fraction")
    return load_config(args.config, **{k: getattr(args, k, None) for k in keys})


def _out_dir(args) -> Path:
    if args.out_dir is None:
        raise ConfigError("--out-dir is required for this command")
    return args.out_dir


def run(args) -> int:
    if args.command == "match":
        if args.category is not None:
            dets = [d for d in load_detections(args.dets) if d.category_id == args.category]
        else:
            dets = load_detections(args.dets)
        gts = load_ground_truth(args.gts)
        samples = match_detections(dets, gts, args.iou, provenance=str(args.dets))
        save_samples(samples, args.out)
        log.info("matched %d of %d detections", int(samples.matched.sum()), len(samples))
    elif args.command == "synth":
        a, b = args.score_shape
        spec = SyntheticSpec(
            n=args.n,
            seed=args.seed or 0,
            score_a=a,
            score_b=b,
            true_weights=args.true_weights,
            true_bias=args.true_bias,
            region=args.region,
            knots=args.knots,
        )
        save_samples(generate(spec), args.out)
    elif args.command == "fit":
        cfg = _config(args)
        paths = cmd_fit(cfg, load_samples(args.train), _out_dir(args))
        for path in paths:
            print(path)
    elif args.command == "eval":
        cfg = _config(args)
        summary = cmd_eval(cfg, load_samples(args.test), args.models, _out_dir(args))
        for r in summary["rows"]:
            extra = "" if r["picp"] is None else f"  PICP {100 * r['picp']:.3f}  MPIW {100 * r['mpiw']:.3f}"
            print(f"{r['method']:>8} {r['subset']:>10} {r['estimator']:>4}  D-ECE {100 * r['d_ece']:.3f}{extra}")
    elif args.command == "experiment":
        cfg = _config(args)
        cmd_experiment(cfg, load_samples(args.samples), _out_dir(args))
    elif args.command == "shift":
        cfg = _config(args)
        model = load_model(args.model)
        if not isinstance(model, ParametricModel):
            raise ConfigError("shift analysis needs a logistic or beta model fitted with SVI")
        summary = cmd_shift(cfg, model, load_samples(args.in_samples), load_samples(args.out_samples),
                            _out_dir(args))
        print(f"median width in {summary['in_distribution']['median_width']:.4f} "
              f"shifted {summary['shifted']['median_width']:.4f} ratio {summary['median_width_ratio']:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, DegenerateLabelsError, InsufficientSamplesError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
