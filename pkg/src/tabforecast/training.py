"""Personalised training protocol, baselines and forecast evaluation."""

from __future__ import annotations

import concurrent.futures
import copy
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import (
    ConfigError,
    DivergedLoss,
    EmptyTestSet,
    SingularNormalEquations,
    TabForecastError,
    TooFewCycles,
    TooFewWindows,
)
from .model import FeatureScaler, TabNetConfig, TabNetModel

log = logging.getLogger(__name__)

AAMI_MAX_ABS_ME = 5.0
AAMI_MAX_SD = 8.0
TRAIN_CYCLES_GRID = (60, 180, 300, 420)
HORIZON_GRID = (5, 10, 20)


@dataclass
class ExperimentSpec:
    train_cycles: int = 420
    input_length: int = 30
    horizons: tuple = (5,)
    split: tuple = (0.7, 0.1, 0.2)
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.split = tuple(float(p) for p in self.split)

    def validate(self):
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError(f"split proportions must be three non-negative numbers summing to 1: {self.split}")
        if not self.horizons:
            raise ConfigError("at least one horizon is required")
        need = self.input_length + max(self.horizons) + self.batch_size
        if self.train_cycles < need:
            raise ConfigError(f"train_cycles={self.train_cycles} < input_length + max(horizon) + batch_size = {need}")


# ---------------------------------------------------------------------------
# windows and splits


@dataclass
class WindowSet:
    inputs: np.ndarray  # n x L_in x (n_features + 1), unscaled
    targets: np.ndarray  # n x H, SBP in mmHg
    starts: np.ndarray  # first cycle index of each input window

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, idx):
        return WindowSet(self.inputs[idx], self.targets[idx], self.starts[idx])

    @property
    def last_sbp(self):
        return self.inputs[:, -1, -1]


def make_windows(series, input_length, horizon):
    """Stride-1 windows: input cycles [t, t+L_in), SBP target [t+L_in, t+L_in+H)."""
    L = len(series)
    n = L - input_length - horizon + 1
    if n < 1:
        raise TooFewCycles(f"{L} cycles cannot hold a {input_length}+{horizon} window")
    chans = series.channels()
    idx = np.arange(n)
    inputs = np.stack([chans[t:t + input_length] for t in idx])
    targets = np.stack([series.sbp[t + input_length:t + input_length + horizon] for t in idx])
    return WindowSet(inputs, targets, idx)


def split_sizes(n, proportions=(0.7, 0.1, 0.2)):
    n_train = int(math.floor(proportions[0] * n + 1e-9))
    n_val = int(math.floor(proportions[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def chronological_split(windows, proportions=(0.7, 0.1, 0.2)):
    """Contiguous (train, val, test) partition in time order."""
    n = len(windows)
    if n < 10:
        raise TooFewWindows(f"need at least 10 windows to split, have {n}")
    n_train, n_val, _ = split_sizes(n, proportions)
    return windows[:n_train], windows[n_train:n_train + n_val], windows[n_train + n_val:]


def derive_seed(base_seed, *parts):
    """Stable 32-bit seed from a base seed and identifying parts."""
    text = "|".join([str(base_seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "best_epoch": self.best_epoch}


def _batch_loss(model, inputs, targets, scale):
    pred = model.forward(inputs)
    inv = 1.0 / scale
    return tt.mse_loss(tt.scale(pred, inv), tt.Tensor((targets * inv).astype(model.dtype)))


def _mean_loss(model, inputs, targets, scale, batch_size=64):
    with tt.no_grad():
        total = 0.0
        for i in range(0, len(inputs), batch_size):
            loss = _batch_loss(model, inputs[i:i + batch_size], targets[i:i + batch_size], scale)
            total += float(loss.data) * len(inputs[i:i + batch_size])
    return total / len(inputs)


def fit(model, train_inputs, train_targets, val_inputs=None, val_targets=None, epochs=10, batch_size=4,
        lr=1e-4, seed=0, target_scale=1.0):
    """Adam/MSE training on pre-scaled windows; keeps the best-validation weights.

    Losses are in normalised units: errors divided by ``target_scale``.
    The final (incomplete) mini-batch of an epoch is kept.
    """
    rng = np.random.default_rng(seed)
    opt = tt.Adam(model.parameters(), lr=lr)
    history = TrainHistory()
    best = (math.inf, None)
    n = len(train_inputs)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for step, i in enumerate(range(0, n, batch_size)):
            batch = order[i:i + batch_size]
            opt.zero_grad()
            loss = _batch_loss(model, train_inputs[batch], train_targets[batch], target_scale)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite loss {value} at epoch {epoch}, step {step} (lr={lr})")
            loss.backward()
            opt.step()
            total += value * len(batch)
        history.train_loss.append(total / n)
        if val_inputs is not None and len(val_inputs):
            v = _mean_loss(model, val_inputs, val_targets, target_scale)
            history.val_loss.append(v)
            if v < best[0]:
                best = (v, model.state_dict())
                history.best_epoch = epoch
        log.debug("epoch %d train %.5f val %s", epoch, history.train_loss[-1],
                  history.val_loss[-1] if history.val_loss else None)
    if best[1] is not None:
        model.load_state_dict(best[1])
    else:
        history.best_epoch = epochs - 1
    return history


@dataclass
class TrainResult:
    model: TabNetModel
    history: TrainHistory
    train: WindowSet
    val: WindowSet
    test: WindowSet


def train_personalized(series, spec, config):
    """Train one subject's model on its first ``spec.train_cycles`` cycles.

    Windows of ``config.input_length`` + ``config.forecast_length`` cycles
    are split 7:1:2 chronologically; feature z-scores come from the cycles
    touched by training windows only.
    """
    spec.validate()
    if len(series) < spec.train_cycles:
        raise TooFewCycles(f"{series.subject_id}: {len(series)} cycles < train_cycles={spec.train_cycles}")
    series = series.head(spec.train_cycles)
    L_in, H = config.input_length, config.forecast_length
    windows = make_windows(series, L_in, H)
    train, val, test = chronological_split(windows, spec.split)
    if len(train) == 0 or len(test) == 0:
        raise TooFewWindows("empty training or test split")
    used = int(train.starts[-1]) + L_in + H
    scaler = FeatureScaler.fit(series.features[:used], series.sbp[:used])

    model = TabNetModel(config)
    model.scaler = scaler
    history = fit(
        model,
        scaler.transform(train.inputs), train.targets,
        scaler.transform(val.inputs) if len(val) else None, val.targets,
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
        seed=config.seed, target_scale=scaler.target_scale,
    )
    return TrainResult(model, history, train, val, test)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ForecastReport:
    subject_id: str
    horizon: int
    mae_mmHg: float
    sd_mmHg: float
    me_mmHg: float
    aami_pass: bool
    n_windows: int
    truth: np.ndarray
    prediction: np.ndarray
    model: str = "tabnet"
    flags: list = field(default_factory=list)

    def to_dict(self, include_series=False):
        d = {
            "subject_id": self.subject_id,
            "model": self.model,
            "horizon": self.horizon,
            "mae": self.mae_mmHg,
            "sd": self.sd_mmHg,
            "me": self.me_mmHg,
            "aami_pass": self.aami_pass,
            "n_windows": self.n_windows,
            "flags": list(self.flags),
        }
        if include_series:
            d["truth"] = self.truth.tolist()
            d["prediction"] = self.prediction.tolist()
        return d

    def series_csv(self):
        buf = io.StringIO()
        buf.write("window_idx,step,truth_mmHg,pred_mmHg\n")
        for w in range(self.truth.shape[0]):
            for j in range(self.truth.shape[1]):
                buf.write(f"{w},{j},{self.truth[w, j]!r},{self.prediction[w, j]!r}\n")
        return buf.getvalue()


def aami_verdict(me, sd):
    return bool(abs(me) <= AAMI_MAX_ABS_ME and sd <= AAMI_MAX_SD)


def error_metrics(truth, prediction):
    """(MAE, ME, SD) over all windows and steps; SD uses n - 1."""
    err = (np.asarray(prediction, dtype=np.float64) - np.asarray(truth, dtype=np.float64)).ravel()
    if err.size == 0:
        raise EmptyTestSet("no forecasts to score")
    sd = float(np.std(err, ddof=1)) if err.size > 1 else 0.0
    return float(np.mean(np.abs(err))), float(np.mean(err)), sd


def make_report(truth, prediction, subject_id="", model="tabnet", flags=()):
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if truth.ndim == 1:
        truth, prediction = truth[None], prediction[None]
    mae, me, sd = error_metrics(truth, prediction)
    return ForecastReport(subject_id, truth.shape[1], mae, sd, me, aami_verdict(me, sd), truth.shape[0],
                          truth, prediction, model, list(flags))


def evaluate(model, windows, subject_id=""):
    if len(windows) == 0:
        raise EmptyTestSet("evaluate needs at least one test window")
    pred = model.forecast(windows.inputs)
    return make_report(windows.targets, pred, subject_id, "tabnet")


def baseline_persistence(windows, subject_id=""):
    """Repeat the last observed SBP over the horizon."""
    if len(windows) == 0:
        raise EmptyTestSet("persistence baseline needs at least one window")
    H = windows.targets.shape[1]
    pred = np.repeat(windows.last_sbp[:, None], H, axis=1)
    return make_report(windows.targets, pred, subject_id, "persistence")


def fit_ar(history, order=5):
    """OLS autoregression with intercept: x[t] = c + sum_i a_i x[t-i].

    Returns (coefficients [c, a_1..a_order], rank_deficient). A
    rank-deficient design gets the minimum-norm least-squares solution,
    which still reproduces series the design can represent exactly
    (constants, linear ramps).
    """
    x = np.asarray(history, dtype=np.float64)
    if x.size <= order + 1:
        raise SingularNormalEquations(f"{x.size} samples too few for AR({order})")
    if np.ptp(x) == 0:  # exact persistence for a flat history
        return np.concatenate([[x[0]], np.zeros(order)]), True
    rows = np.stack([x[t - order:t][::-1] for t in range(order, x.size)])
    X = np.column_stack([np.ones(len(rows)), rows])
    y = x[order:]
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if not np.all(np.isfinite(coef)):
        raise SingularNormalEquations("least-squares solution is not finite")
    return coef, rank < X.shape[1]


def ar_forecast(history, coef, horizon):
    order = len(coef) - 1
    buf = list(np.asarray(history, dtype=np.float64)[-order:])
    out = []
    for _ in range(horizon):
        nxt = coef[0] + float(np.dot(coef[1:], buf[::-1][:order]))
        out.append(nxt)
        buf.append(nxt)
    return np.asarray(out)


def baseline_linear(windows, subject_id="", order=5):
    """Per-window AR(order) fit on the input SBP history, iterated over the horizon."""
    if len(windows) == 0:
        raise EmptyTestSet("linear baseline needs at least one window")
    H = windows.targets.shape[1]
    preds, flags = [], set()
    for hist in windows.inputs[:, :, -1]:
        try:
            coef, deficient = fit_ar(hist, order)
            if deficient:
                flags.add("rank_deficient_design")
            preds.append(ar_forecast(hist, coef, H))
        except SingularNormalEquations:
            flags.add("fallback_persistence")
            preds.append(np.full(H, hist[-1]))
    return make_report(windows.targets, np.asarray(preds), subject_id, "linear", sorted(flags))


# ---------------------------------------------------------------------------
# experiment grid

MODELS = ("tabnet", "persistence", "linear")


def run_single(series, train_cycles, horizon, config, spec):
    """Train and score TABNet plus both baselines on one subject / grid cell."""
    cell_seed = derive_seed(spec.seed, series.subject_id, train_cycles, horizon)
    cfg = dataclasses.replace(config, forecast_length=horizon, input_length=spec.input_length,
                              epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr, seed=cell_seed)
    cell_spec = dataclasses.replace(spec, train_cycles=train_cycles, horizons=(horizon,))
    result = train_personalized(series, cell_spec, cfg)
    sid = series.subject_id
    return {
        "tabnet": evaluate(result.model, result.test, sid),
        "persistence": baseline_persistence(result.test, sid),
        "linear": baseline_linear(result.test, sid),
    }


def _run_cell_task(args):
    series, train_cycles, horizon, config, spec = args
    try:
        reports = run_single(series, train_cycles, horizon, config, spec)
        return {m: r.to_dict() for m, r in reports.items()}, None
    except TabForecastError as exc:
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class GridResult:
    train_cycles: tuple
    horizons: tuple
    cells: list  # dicts: model, train_cycles, horizon, mae, sd, me, n_subjects, status, subjects

    def cell(self, model, train_cycles, horizon):
        for c in self.cells:
            if (c["model"], c["train_cycles"], c["horizon"]) == (model, train_cycles, horizon):
                return c
        raise KeyError((model, train_cycles, horizon))

    def to_csv(self):
        head = ["model", "train_cycles"]
        for h in self.horizons:
            head += [f"h{h}_mae", f"h{h}_sd"]
        lines = [",".join(head)]
        for model in MODELS:
            for tc in self.train_cycles:
                row = [model, str(tc)]
                for h in self.horizons:
                    c = self.cell(model, tc, h)
                    row += [_fmt(c["mae"]), _fmt(c["sd"])]
                lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"train_cycles": list(self.train_cycles), "horizons": list(self.horizons), "cells": self.cells}


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def run_grid(subjects, config, spec, train_cycles=TRAIN_CYCLES_GRID, horizons=HORIZON_GRID, jobs=1):
    """Training-length x horizon grid; each cell averages per-subject MAE/SD.

    A failing (subject, cell) is recorded and skipped; a cell with no
    successful subject is marked failed with NaN metrics.
    """
    tasks = [(s, tc, h) for tc in train_cycles for h in horizons for s in subjects]
    args = [(s, tc, h, config, spec) for s, tc, h in tasks]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_task, args))
    else:
        outcomes = [_run_cell_task(a) for a in args]

    by_cell = {}
    for (s, tc, h), (reports, error) in zip(tasks, outcomes):
        by_cell.setdefault((tc, h), []).append((s.subject_id, reports, error))

    cells = []
    for tc in train_cycles:
        for h in horizons:
            entries = by_cell[(tc, h)]
            errors = {sid: err for sid, _, err in entries if err}
            for model in MODELS:
                per = [(sid, rep[model]) for sid, rep, _ in entries if rep is not None]
                if per:
                    mae = float(np.mean([r["mae"] for _, r in per]))
                    sd = float(np.mean([r["sd"] for _, r in per]))
                    me = float(np.mean([r["me"] for _, r in per]))
                    status = "ok" if not errors else "partial"
                else:
                    mae = sd = me = float("nan")
                    status = "failed"
                cells.append({
                    "model": model, "train_cycles": tc, "horizon": h, "mae": mae, "sd": sd, "me": me,
                    "n_subjects": len(per), "status": status,
                    "subjects": {sid: r for sid, r in per}, "errors": errors,
                })
    return GridResult(tuple(train_cycles), tuple(horizons), cells)
