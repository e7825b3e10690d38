"""Command-line entry point: synth, features, train, forecast, evaluate, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .config import ENV_VAR, RunConfig
from .errors import ConfigError, DataError, IndexOutOfRange, ShapeMismatch, TabForecastError
from .features import CycleFeatureSeries, record_to_series
from .model import load_checkpoint, save_checkpoint
from .training import (
    baseline_linear,
    baseline_persistence,
    chronological_split,
    evaluate,
    make_windows,
    run_grid,
    train_personalized,
)
from .waveform import load_record, save_record, synthesize

log = logging.getLogger("tabforecast")

SBP_BAND_MMHG = (40.0, 260.0)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _envelope(cfg, **body):
    return {"version": __version__, "config": cfg.to_dict(), **body}


def _resolve_config(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.set("experiment", "seed", args.seed)
    for section, key, attr in (
        ("synth", "subjects", "subjects"),
        ("synth", "n_beats", "n_beats"),
        ("experiment", "train_cycles", "train_cycles"),
        ("experiment", "epochs", "epochs"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, value)
    return cfg.validate()


def _int_list(text):
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_series(path):
    try:
        return CycleFeatureSeries.from_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read feature table {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _series_from_record(cfg, record):
    ecg_spec, ppg_spec = cfg.filter_specs(record.sample_rate_hz)
    return record_to_series(record, cfg.fuzzy_params(), ecg_spec, ppg_spec)


def _check_table(model, series, path):
    if series.features.shape[1] != model.config.n_features:
        raise ShapeMismatch(f"{path}: {series.features.shape[1]} feature columns, checkpoint expects "
                            f"{model.config.n_features}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if args.format == "binary" else ".csv"
    subjects = []
    for k in range(cfg.get("synth", "subjects")):
        spec = cfg.synth_spec(k)
        record, truth = synthesize(spec)
        name = f"{spec.subject_id}{ext}"
        save_record(record, out / name, format=args.format)
        subjects.append({"subject_id": spec.subject_id, "file": name, "seed": spec.seed,
                         "n_samples": len(record), "n_beats": len(truth.r_times_s)})
        log.info("wrote %s", out / name)
    atomic_write_text(out / "manifest.json", _dump(_envelope(cfg, subjects=subjects)))
    return 0


def cmd_features(args, cfg):
    try:
        record = load_record(args.input)
    except OSError as exc:
        raise DataError(f"cannot read record {args.input}: {exc}") from None
    try:
        series = _series_from_record(cfg, record)
    except TabForecastError as exc:
        exc.args = (f"{args.input}: {exc}",)
        raise
    series.to_csv(args.out)
    log.info("%s: %d cycles -> %s", args.input, len(series), args.out)
    return 0


def cmd_train(args, cfg):
    series = _load_series(args.features)
    horizon = args.horizon or cfg.get("experiment", "forecast_length")
    config = cfg.model_config(forecast_length=horizon)
    spec = cfg.experiment_spec(horizons=(horizon,))
    result = train_personalized(series, spec, config)
    save_checkpoint(result.model, args.out)
    history_path = args.history or f"{args.out}.history.json"
    body = _envelope(
        cfg,
        subject_id=series.subject_id,
        horizon=horizon,
        train_cycles=spec.train_cycles,
        n_windows={"train": len(result.train), "val": len(result.val), "test": len(result.test)},
        history=result.history.to_dict(),
    )
    atomic_write_text(history_path, _dump(body))
    log.info("best epoch %d; checkpoint %s", result.history.best_epoch, args.out)
    return 0


def forecast_at(model, series, at, horizon):
    """Predictions for cycles [at, at + horizon) from the window ending before ``at``."""
    L_in, H = model.config.input_length, model.config.forecast_length
    if not 1 <= horizon <= H:
        raise ConfigError(f"horizon {horizon} outside [1, {H}] for this checkpoint")
    if not L_in <= at <= len(series):
        raise IndexOutOfRange(f"--at {at} must lie in [{L_in}, {len(series)}]")
    window = series.channels()[at - L_in:at]
    pred = model.forecast(window)[:horizon]
    truth = series.sbp[at:at + horizon]
    return pred, (truth if len(truth) == horizon else None)


def cmd_forecast(args, cfg):
    model = load_checkpoint(args.checkpoint)
    series = _load_series(args.features)
    _check_table(model, series, args.features)
    horizon = args.horizon or model.config.forecast_length
    pred, truth = forecast_at(model, series, args.at, horizon)
    if not np.all(np.isfinite(pred)):
        raise DataError("non-finite prediction")
    lo, hi = SBP_BAND_MMHG
    clamped = np.clip(pred, lo, hi)
    warnings = []
    if np.any(clamped != pred):
        warnings.append(f"predictions clamped to [{lo}, {hi}] mmHg")
        log.warning(warnings[-1])
    body = _envelope(cfg, subject_id=series.subject_id, at=args.at, horizon=horizon,
                     predictions=clamped.tolist(), raw_predictions=pred.tolist(),
                     truth=None if truth is None else truth.tolist(), warnings=warnings)
    text = _dump(body)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def evaluation_windows(model, series, cfg):
    """The held-out test windows of the first ``train_cycles`` cycles, as seen by training."""
    L_in, H = model.config.input_length, model.config.forecast_length
    tc = min(cfg.get("experiment", "train_cycles"), len(series))
    windows = make_windows(series.head(tc), L_in, H)
    return chronological_split(windows, cfg.get("experiment", "split"))[2]


def cmd_evaluate(args, cfg):
    model = load_checkpoint(args.checkpoint)
    series = _load_series(args.features)
    _check_table(model, series, args.features)
    test = evaluation_windows(model, series, cfg)
    sid = series.subject_id
    report = evaluate(model, test, sid)
    baselines = {"persistence": baseline_persistence(test, sid).to_dict(),
                 "linear": baseline_linear(test, sid).to_dict()}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = _envelope(cfg, report=report.to_dict(), baselines=baselines, test_starts=test.starts.tolist())
    atomic_write_text(out / "report.json", _dump(body))
    atomic_write_text(out / "series.csv", report.series_csv())
    log.info("%s: MAE %.3f SD %.3f ME %.3f AAMI %s", sid, report.mae_mmHg, report.sd_mmHg, report.me_mmHg,
             "pass" if report.aami_pass else "fail")
    return 0


def cmd_ablate(args, cfg):
    train_cycles = args.grid_train_cycles or cfg.get("experiment", "grid_train_cycles")
    horizons = args.grid_horizons or cfg.get("experiment", "grid_horizons")
    if args.features:
        subjects = [_load_series(p) for p in args.features]
    else:
        need = max(train_cycles) + 4  # first/last cycles are dropped during extraction
        if cfg.get("synth", "n_beats") < need:
            cfg.set("synth", "n_beats", need)
        subjects = []
        for k in range(cfg.get("synth", "subjects")):
            record, _ = synthesize(cfg.synth_spec(k))
            subjects.append(_series_from_record(cfg, record))
    config = cfg.model_config()
    spec = cfg.experiment_spec()
    grid = run_grid(subjects, config, spec, train_cycles, horizons, jobs=args.jobs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "grid.csv", grid.to_csv())
    body = _envelope(cfg, subjects=[s.subject_id for s in subjects], averaging="per-subject then mean",
                     grid=grid.to_dict())
    atomic_write_text(out / "grid.json", _dump(body))
    failed = [c for c in grid.cells if c["status"] != "ok"]
    if failed:
        log.warning("%d grid cells incomplete", len(failed))
    return 0


# ---------------------------------------------------------------------------
# parser


def _global_options(top):
    # Subcommand copies must not reset values given before the subcommand.
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help=f"INI config file (default: ${ENV_VAR})")
    g.add_argument("--seed", type=int, default=d(None), help="base seed")
    g.add_argument("--jobs", type=int, default=d(1), help="parallel worker processes")
    g.add_argument("--verbose", "-v", action="count", default=d(0))
    return g


def build_parser():
    p = argparse.ArgumentParser(prog="tabforecast", parents=[_global_options(top=True)],
                                description="Personalised beat-to-beat SBP forecasting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = _global_options(top=False)

    s = sub.add_parser("synth", parents=[common], help="write synthetic subject records")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--subjects", type=int, default=None)
    s.add_argument("--n-beats", type=int, default=None)
    s.add_argument("--format", choices=("csv", "binary"), default="csv")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", parents=[common], help="extract the per-cycle feature table")
    s.add_argument("--in", dest="input", required=True, help="record file (.csv or .bin)")
    s.add_argument("--out", required=True, help="feature CSV")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", parents=[common], help="train one personalised model")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", default=None, help="history JSON (default: <out>.history.json)")
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--train-cycles", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", parents=[common], help="forecast SBP from a chosen cycle")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--at", type=int, required=True, help="index of the first forecast cycle")
    s.add_argument("--horizon", type=int, default=None)
    s.add_argument("--out", default=None, help="JSON output (default: stdout)")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on its test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--train-cycles", type=int, default=None)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="training-length x horizon grid with baselines")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--features", nargs="*", default=None, help="feature tables (default: synthesise)")
    s.add_argument("--subjects", type=int, default=None)
    s.add_argument("--train-cycles", dest="grid_train_cycles", type=_int_list, default=None,
                   help="e.g. 60,180,300,420")
    s.add_argument("--horizons", dest="grid_horizons", type=_int_list, default=None, help="e.g. 5,10,20")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except TabForecastError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
