"""Command line driver: ``bcpmf prepare | train | eval | diagnose``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pipeline, vi
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import MOVIELENS_QUANTILES, ConfigError, ParseError, frequency_bins
from .evaluation import (export_cdf, feature_variance_vs_frequency,
                         precision_error_correlation, rmse, rmse_by_frequency)
from .map_estimator import MapResult, OptimizerError
from .model import PrecisionMode, PrecisionState, predict_entries

log = logging.getLogger("bcpmf")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------- helpers

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, cfg: ExperimentConfig, command: str, artifacts):
    """Add ``artifacts`` to ``manifest.json`` in ``out_dir`` (entries are keyed by path)."""
    path = out_dir / "manifest.json"
    manifest = {"artifacts": {}}
    if path.exists():
        with open(path) as fh:
            manifest = json.load(fh)
    for a in artifacts:
        a = Path(a)
        manifest["artifacts"][a.name] = {"command": command, "config_hash": cfg.digest(),
                                         "sha256": _sha256(a)}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _save_config(out_dir: Path, cfg: ExperimentConfig, command: str) -> Path:
    p = out_dir / f"config_{command}.ini"
    p.write_text(cfg.to_text())
    return p


def _write_rows(path, rows, drop=()):
    if not rows:
        return
    fields = [k for k in rows[0] if k not in drop]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _initial_precisions(prec: PrecisionState, cfg: ExperimentConfig) -> PrecisionState:
    mode, lo, hi = pipeline.precision_mode(cfg)
    if prec.mode == mode and prec.lo == lo and prec.hi == hi:
        return prec
    # switching models: keep tau, restart the factors at one (clamped into bounds)
    one = float(np.clip(1.0, lo, hi))
    return PrecisionState(np.full(len(prec.alpha), one), np.full(len(prec.beta), one),
                          prec.tau, mode, lo, hi)


def _side_train(ckpt: Checkpoint, data: pipeline.Dataset):
    """The rating sets a checkpoint's side term was fitted on."""
    return data.train if ckpt.backend == "map" else data.train_full


def _test_predictions(ckpt: Checkpoint, data: pipeline.Dataset, clamp=False, scale=(1, 5)):
    pred = ckpt.extras.get("test_prediction")
    if pred is None or len(pred) != len(data.test):
        pred = predict_entries(ckpt.features, _side_train(ckpt, data),
                               data.test.users, data.test.items)
    if clamp:
        pred = np.clip(pred, *scale)
    return np.asarray(pred, float)


# ---------------------------------------------------------------- commands

def cmd_prepare(cfg: ExperimentConfig, out_dir: Path):
    if not cfg.data.path:
        raise ConfigError("no dataset path given (data.path or --data)")
    data = pipeline.load_dataset(cfg)
    paths = pipeline.write_prepared(data, out_dir)
    paths.append(_save_config(out_dir, cfg, "prepare"))
    write_run_manifest(out_dir, cfg, "prepare", paths)
    print(f"prepared {len(data.train)} train / {len(data.validation)} validation / "
          f"{len(data.test)} test ratings in {out_dir}")


def cmd_train(cfg: ExperimentConfig, backend: str, split_dir: Path, out_dir: Path,
              init_path=None):
    data = pipeline.load_prepared(split_dir, (cfg.data.scale_lo, cfg.data.scale_hi))
    out_dir.mkdir(parents=True, exist_ok=True)
    drop = () if cfg.output.record_timing else ("elapsed_ms",)
    artifacts = []
    if init_path is not None:
        init_ckpt = load_checkpoint(init_path)
        f = init_ckpt.features
        if f.U.shape != (data.train.num_users, cfg.model.d) or f.V.shape[0] != data.train.num_items:
            raise ConfigError("initial checkpoint does not match the data or model.d")
        if (f.use_user, f.use_side) != (cfg.model.use_user, cfg.model.use_side):
            raise ConfigError("initial checkpoint feature flags differ from the config")
        init = MapResult(f, init_ckpt.precisions, None, None)
    else:
        init = pipeline.run_map(cfg, data)
        if backend == "map":
            rows = []
            for stage, h in (("bias", init.bias_history), ("feature", init.feature_history)):
                for k, e in enumerate(h.energy):
                    rows.append({"stage": stage, "epoch": k, "energy": e,
                                 "rmse_train": h.train_rmse[k] if k < len(h.train_rmse) else "",
                                 "rmse_validation": h.val_rmse[k] if k < len(h.val_rmse) else ""})
            p = out_dir / "map_history.csv"
            _write_rows(p, rows)
            artifacts.append(p)
    init = MapResult(init.features, _initial_precisions(init.precisions, cfg),
                     init.bias_history, init.feature_history)

    if backend == "map":
        pred = predict_entries(init.features, data.train, data.test.users, data.test.items)
        ckpt = Checkpoint(init.features, init.precisions, None,
                          {"test_prediction": pred}, "map")
    elif backend == "gibbs":
        res = pipeline.run_gibbs(cfg, data, init)
        p = out_dir / "trace.csv"
        _write_rows(p, res.trace, drop)
        artifacts.append(p)
        pred = res.prediction.mean
        extras = {"test_prediction": pred, "samples": res.prediction.count}
        if res.user_feature_variance is not None:
            extras["user_variance"] = res.user_feature_variance
        ckpt = Checkpoint(res.state, res.precisions, res.hyper, extras, "gibbs")
    else:
        res = pipeline.run_vi(cfg, data, init)
        p = out_dir / "curve.csv"
        res.write_curve(p)
        artifacts.append(p)
        vs = res.state
        pred = res.test_prediction
        ckpt = Checkpoint(vs.point_estimate(), vs.precision_state(), None,
                          {"test_prediction": pred,
                           "user_variance": np.diagonal(vs.SU, axis1=1, axis2=2)}, "vi")
    p = out_dir / f"checkpoint_{backend}.npz"
    save_checkpoint(p, ckpt)
    artifacts += [p, _save_config(out_dir, cfg, "train")]
    write_run_manifest(out_dir, cfg, f"train --backend {backend}", artifacts)
    if len(data.test):
        print(f"{backend}: test RMSE {rmse(pred, data.test):.4f}; checkpoint {p}")


def cmd_eval(cfg: ExperimentConfig, split_dir: Path, out_dir: Path, ckpt_path, baseline_path=None,
             clamp=False):
    data = pipeline.load_prepared(split_dir, (cfg.data.scale_lo, cfg.data.scale_hi))
    ckpt = load_checkpoint(ckpt_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = (cfg.data.scale_lo, cfg.data.scale_hi)
    pred = _test_predictions(ckpt, data, clamp, scale)
    base = None
    if baseline_path is not None:
        base = _test_predictions(load_checkpoint(baseline_path), data, clamp, scale)
    bins = frequency_bins(data.train, MOVIELENS_QUANTILES)
    report = rmse_by_frequency(pred, data.test, data.train, bins, base)
    artifacts = [out_dir / "binned_rmse.csv"]
    report.write_csv(artifacts[0])
    summary = {"backend": ckpt.backend, "test_rmse": report.overall,
               "test_ratings": len(data.test), "clamped": bool(clamp)}
    prec = ckpt.precisions
    if prec.mode != PrecisionMode.CONSTANT:
        side = _side_train(ckpt, data)
        for name, entries in (("train", side), ("test", data.test)):
            p_entries = predict_entries(ckpt.features, side, entries.users, entries.items)
            try:
                u, i = precision_error_correlation(prec, p_entries, entries)
                summary[f"{name}_correlation"] = {"user": u, "item": i}
            except ValueError as exc:
                summary[f"{name}_correlation"] = str(exc)
        for name, values in (("alpha", prec.alpha), ("beta", prec.beta)):
            p = out_dir / f"{name}_cdf.csv"
            export_cdf(values, p)
            artifacts.append(p)
    p = out_dir / "summary.json"
    with open(p, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts.append(p)
    write_run_manifest(out_dir, cfg, "eval", artifacts)
    print(f"test RMSE {report.overall:.4f}")
    for r, comp in zip(report.rows, report.comparison or [None] * len(report.rows)):
        extra = f"  change {comp[1]:+.2f}%" if comp else ""
        print(f"  {r.label:>5} {r.count_range:>10}  rmse {r.rmse:.4f}  users {r.users}{extra}")


def parse_bounds(text):
    out = []
    for part in text.split(","):
        try:
            lo, hi = (float(v) for v in part.split(":"))
        except ValueError:
            raise ConfigError(f"bounds must look like lo:hi[,lo:hi...], got {text!r}") from None
        if not 0 < lo < hi:
            raise ConfigError(f"invalid bounds {part!r}")
        out.append((lo, hi))
    return out


def cmd_diagnose(cfg: ExperimentConfig, split_dir: Path, out_dir: Path, ckpt_path, bounds=()):
    data = pipeline.load_prepared(split_dir, (cfg.data.scale_lo, cfg.data.scale_hi))
    ckpt = load_checkpoint(ckpt_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    var = ckpt.extras.get("user_variance")
    if var is not None:
        p = out_dir / "feature_variance_vs_frequency.csv"
        feature_variance_vs_frequency(var, _side_train(ckpt, data).user_counts, p)
        artifacts.append(p)
    if ckpt.precisions.mode != PrecisionMode.CONSTANT:
        for name, values in (("alpha", ckpt.precisions.alpha), ("beta", ckpt.precisions.beta)):
            p = out_dir / f"{name}_cdf.csv"
            export_cdf(values, p)
            artifacts.append(p)
    if bounds:
        rows = []
        for lo, hi in bounds:
            cfg.model.precision, cfg.model.lo, cfg.model.hi = "truncated", lo, hi
            init = MapResult(ckpt.features, _initial_precisions(ckpt.precisions, cfg), None, None)
            res = pipeline.run_vi(cfg, data, init)
            rows.append({"lo": lo, "hi": hi, "updates": len(res.curve),
                         "rmse_test": res.curve[-1]["rmse_test"]})
            log.info("bounds (%g, %g): test rmse %.4f", lo, hi, rows[-1]["rmse_test"])
        p = out_dir / "truncation_sweep.csv"
        _write_rows(p, rows)
        artifacts.append(p)
    if not artifacts:
        print("nothing to export: checkpoint has no variances and constant precisions")
    write_run_manifest(out_dir, cfg, "diagnose", artifacts)
    for a in artifacts:
        print(a)


# ---------------------------------------------------------------- argument parsing

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 is the reproducible mode")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bcpmf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="parse and split a rating file")
    p.add_argument("--data", help="rating file")
    p.add_argument("--format", choices=["movielens_dat", "tsv_triplets"])

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("--splits", help="directory written by 'prepare' (default: --out)")
    p.add_argument("--backend", choices=["map", "gibbs", "vi"], required=True)
    p.add_argument("--init", help="checkpoint to start from instead of running the point estimate")
    p.add_argument("--precision", choices=[m.value for m in PrecisionMode])
    p.add_argument("--lo", type=float, help="lower truncation bound")
    p.add_argument("--hi", type=float, help="upper truncation bound")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="second checkpoint for relative-change columns")
    p.add_argument("--clamp", action="store_true", help="clip predictions to the rating scale")

    p = sub.add_parser("diagnose", parents=[common], help="export diagnostic curves")
    p.add_argument("--splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bounds", help="truncation bound sweep, e.g. 0.5:2,0.25:4")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"experiment.threads={args.threads}")
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    if args.command == "prepare":
        if args.data:
            overrides.append(f"data.path={args.data}")
        if args.format:
            overrides.append(f"data.format={args.format}")
    if args.command == "train":
        if args.precision:
            overrides.append(f"model.precision={args.precision}")
        if args.lo is not None:
            overrides.append(f"model.lo={args.lo}")
        if args.hi is not None:
            overrides.append(f"model.hi={args.hi}")
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.seed = args.seed  # an explicit flag beats the environment
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        out_dir = Path(cfg.output.dir)
        split_dir = Path(getattr(args, "splits", None) or out_dir)
        with threadpool_limits(limits=cfg.threads):
            if args.command == "prepare":
                cmd_prepare(cfg, out_dir)
            elif args.command == "train":
                cmd_train(cfg, args.backend, split_dir, out_dir, args.init)
            elif args.command == "eval":
                cmd_eval(cfg, split_dir, out_dir, args.checkpoint, args.baseline, args.clamp)
            else:
                cmd_diagnose(cfg, split_dir, out_dir, args.checkpoint,
                             parse_bounds(args.bounds) if args.bounds else ())
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, FloatingPointError, OptimizerError,
            vi.ElboUnavailable) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
