"""Canonical synthetic fixtures shared by unit and acceptance tests."""

import numpy as np

from tabforecast.config import RunConfig
from tabforecast.features import record_to_series
from tabforecast.model import FeatureScaler, TabNetConfig, TabNetModel
from tabforecast.training import fit, make_windows
from tabforecast.waveform import SynthSpec, synthesize

OVERFIT_LR = 1e-3


def overfit_windows():
    """First 8 windows (L_in=30, H=5) of the default synthetic subject, with their scaler."""
    rec, _ = synthesize(SynthSpec(seed=0, n_beats=60))
    s = record_to_series(rec)
    w = make_windows(s, 30, 5)[:8]
    scaler = FeatureScaler.fit(s.features[:42], s.sbp[:42])
    return w, scaler


def overfit(fixture, lr=OVERFIT_LR, epochs=200):
    """Train a default model on the fixture; returns (history, train MSE in normalised units)."""
    w, scaler = fixture
    m = TabNetModel(TabNetConfig(seed=0))
    m.scaler = scaler
    h = fit(m, scaler.transform(w.inputs), w.targets, epochs=epochs, lr=lr, target_scale=scaler.target_scale)
    return h, float(np.mean(((m.forecast(w.inputs) - w.targets) / scaler.target_scale) ** 2))


def learnability_subjects(n=5):
    """The first ``n`` default synthetic subjects (seed-derived, gain 0.5 mmHg/ms, noise 2 mmHg)."""
    cfg = RunConfig()
    out = []
    for k in range(n):
        rec, _ = synthesize(cfg.synth_spec(k))
        out.append(record_to_series(rec))
    return out
