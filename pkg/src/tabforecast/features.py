"""Per-heartbeat feature extraction: the 38-column series fed to the model."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from ._io import atomic_write_text
from .dsp import annotate, preprocess
from .errors import DegenerateSignal, InvalidSpec, MissingAbp, ShapeMismatch, SignalTooShort, TooFewCycles

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "pat_foot_ms", "pat_peak_ms", "pat_slope_ms", "delta_pat_foot_ms", "hr_bpm", "rr_ms",
    "ppg_peak_amp", "ppg_foot_amp", "ppg_peak_foot_diff", "ppg_half_width_ms", "ppg_rise_ms", "ppg_fall_ms",
    "ecg_mean", "ecg_abs_sum", "ecg_var", "ecg_sum_sq", "ecg_max",
    "ppg_mean", "ppg_abs_sum", "ppg_var", "ppg_sum_sq", "ppg_max",
    "ecg_min", "ppg_min", "ecg_skew", "ppg_skew", "ecg_kurtosis", "ppg_kurtosis",
    "ecg_ppg_xcorr", "ecg_ppg_xcorr_lag_ms", "ecg_fuzzy_entropy", "ppg_fuzzy_entropy",
    "ppg_d1_max", "ppg_d2_max", "pat_rr_ratio", "ppg_integral", "ppg_systolic_area", "ppg_diastolic_area",
)
N_FEATURES = len(FEATURE_NAMES)
TARGET_COLUMNS = ("sbp", "dbp", "cycle_time_s")
SBP_RANGE = (40.0, 260.0)
DBP_RANGE = (20.0, 200.0)


@dataclass(frozen=True)
class FuzzyEntropyParams:
    m: int = 2
    r_frac: float = 0.2
    n: float = 2.0

    def validate(self):
        if self.m < 1 or not 0 < self.r_frac < 1 or self.n <= 0:
            raise InvalidSpec(f"invalid fuzzy entropy parameters {self}")


def _phi(x, k, r, n, count):
    templates = sliding_window_view(x, k)[:count]
    templates = templates - templates.mean(axis=1, keepdims=True)
    dist = np.zeros((count, count))
    for j in range(k):
        col = templates[:, j]
        np.maximum(dist, np.abs(col[:, None] - col[None, :]), out=dist)
    sim = np.exp(-((dist / r) ** n))
    return (sim.sum() - np.trace(sim)) / (count * (count - 1))


def fuzzy_entropy(x, params=FuzzyEntropyParams()):
    """FuzzyEn(m, r) = ln(phi_m) - ln(phi_{m+1}).

    Both template sets use the first N - m start positions; each template
    is mean-removed and compared by Chebyshev distance through
    exp(-(d / r)^n), with r = r_frac * SD(x). A zero-SD signal returns 0.
    """
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    m = params.m
    if x.size < m + 2:
        raise SignalTooShort(f"fuzzy entropy needs >= {m + 2} samples, got {x.size}")
    sd = x.std()
    if sd == 0:
        log.debug("fuzzy entropy of a constant signal set to 0")
        return 0.0
    r = params.r_frac * sd
    count = x.size - m
    return float(np.log(_phi(x, m, r, params.n, count)) - np.log(_phi(x, m + 1, r, params.n, count)))


def cross_correlation_peak(x, y, max_lag):
    """Largest normalised cross-correlation over lags -max_lag..max_lag.

    The coefficient at lag L is sum_t x'[t] * y'[t + L] / (N sd_x sd_y) for
    mean-removed x', y' (zero outside the record). Ties go to the most
    negative lag.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 4:
        raise ShapeMismatch("cross_correlation_peak needs equal-length 1D inputs of length >= 4")
    n = x.size
    if not 0 <= max_lag < n:
        raise ShapeMismatch(f"max_lag {max_lag} must lie in [0, {n})")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = xc.std(), yc.std()
    if sx == 0 or sy == 0:
        raise DegenerateSignal("cross-correlation of a zero-variance signal")
    full = np.correlate(yc, xc, mode="full") / (n * sx * sy)  # index k <-> lag k - (n - 1)
    window = full[n - 1 - max_lag:n + max_lag]
    k = int(np.argmax(window))
    return float(np.clip(window[k], -1.0, 1.0)), k - max_lag


# ---------------------------------------------------------------------------
# series container


@dataclass
class CycleFeatureSeries:
    subject_id: str
    features: np.ndarray  # L x 38
    sbp: np.ndarray
    dbp: np.ndarray
    cycle_times_s: np.ndarray
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sbp = np.asarray(self.sbp, dtype=np.float64)
        self.dbp = np.asarray(self.dbp, dtype=np.float64)
        self.cycle_times_s = np.asarray(self.cycle_times_s, dtype=np.float64)
        self.feature_names = tuple(self.feature_names)
        L = len(self.sbp)
        if self.features.shape != (L, len(self.feature_names)) or len(self.dbp) != L or len(self.cycle_times_s) != L:
            raise ShapeMismatch(f"feature matrix {self.features.shape} inconsistent with {L} targets")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ShapeMismatch("feature names must be unique")

    def __len__(self):
        return len(self.sbp)

    def head(self, n):
        return CycleFeatureSeries(self.subject_id, self.features[:n], self.sbp[:n], self.dbp[:n],
                                  self.cycle_times_s[:n], self.feature_names)

    def channels(self):
        """L x 39 model input: features then SBP history."""
        return np.column_stack([self.features, self.sbp])

    def to_csv_text(self):
        buf = io.StringIO()
        buf.write(f"# subject_id={self.subject_id}\n")
        buf.write(",".join(self.feature_names + TARGET_COLUMNS) + "\n")
        table = np.column_stack([self.features, self.sbp, self.dbp, self.cycle_times_s])
        for row in table:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def to_csv(self, path):
        atomic_write_text(path, self.to_csv_text())

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        subject_id = ""
        if lines and lines[0].startswith("#"):
            key, _, value = lines[0].lstrip("#").strip().partition("=")
            if key.strip() == "subject_id":
                subject_id = value.strip()
            lines = lines[1:]
        if not lines:
            raise ShapeMismatch(f"{path}: no header")
        header = lines[0].split(",")
        if tuple(header[-3:]) != TARGET_COLUMNS:
            raise ShapeMismatch(f"{path}: header must end with {','.join(TARGET_COLUMNS)}")
        body = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        if body.shape[1] != len(header):
            raise ShapeMismatch(f"{path}: {body.shape[1]} columns vs {len(header)} header names")
        return cls(subject_id, body[:, :-3], body[:, -3], body[:, -2], body[:, -1], tuple(header[:-3]))


# ---------------------------------------------------------------------------
# extraction


def _moments(seg):
    return [seg.mean(), np.abs(seg).sum(), seg.var(), np.sum(seg * seg), seg.max()]


def _half_width(ppg, foot, peak, next_foot):
    level = ppg[foot] + 0.5 * (ppg[peak] - ppg[foot])
    left = peak
    while left > foot and ppg[left - 1] >= level:
        left -= 1
    right = peak
    while right < next_foot and ppg[right + 1] >= level:
        right += 1
    return right - left + 1


def _cycle_features(i, ann, ecg, ppg, fs, fe_params):
    s, e = ann.cycles[i]
    r = s
    foot, peak, slope = ann.ppg_feet[i], ann.ppg_peaks[i], ann.ppg_max_slopes[i]
    prev_foot = ann.ppg_feet[i - 1] - ann.cycles[i - 1][0]
    next_foot = ann.ppg_feet[i + 1]
    ms = 1000.0 / fs
    dt = 1.0 / fs
    rr = (e - s) * ms
    pat_foot = (foot - r) * ms
    ecg_c = ecg[s:e]
    ppg_c = ppg[s:e]
    try:
        xc, lag = cross_correlation_peak(ecg_c, ppg_c, max((e - s) // 2, 1))
    except DegenerateSignal:
        xc, lag = np.nan, np.nan
    d1 = np.diff(ppg_c) * fs
    d2 = np.diff(ppg_c, n=2) * fs * fs
    row = [
        pat_foot,
        (peak - r) * ms,
        (slope - r) * ms,
        pat_foot - prev_foot * ms,
        60000.0 / rr,
        rr,
        ppg[peak],
        ppg[foot],
        ppg[peak] - ppg[foot],
        _half_width(ppg, foot, peak, next_foot) * ms,
        (peak - foot) * ms,
        (next_foot - peak) * ms,
        *_moments(ecg_c),
        *_moments(ppg_c),
        ecg_c.min(),
        ppg_c.min(),
        stats.skew(ecg_c),
        stats.skew(ppg_c),
        stats.kurtosis(ecg_c),
        stats.kurtosis(ppg_c),
        xc,
        lag * ms,
        fuzzy_entropy(ecg_c, fe_params),
        fuzzy_entropy(ppg_c, fe_params),
        d1.max(),
        d2.max(),
        pat_foot / rr,
        ppg_c.sum() * dt,
        ppg[foot:peak].sum() * dt,
        ppg[peak:next_foot].sum() * dt,
    ]
    return row


def extract_features(record, annotation, filtered=None, fe_params=FuzzyEntropyParams(), require_targets=True):
    """Feature series for the retained cycles of ``annotation``.

    ``filtered`` is the (ecg, ppg) pair the annotation was computed on;
    when omitted the record is re-filtered. The first and last detected
    cycles are dropped (filter edges), as is any cycle whose neighbours
    lack PPG landmarks (delta-PAT and fall time need them) or whose values
    are non-finite or out of physiological range.
    """
    if require_targets and not record.has("abp"):
        raise MissingAbp(f"record {record.subject_id!r} has no ABP channel for SBP/DBP targets")
    ecg, ppg = filtered if filtered is not None else preprocess(record)
    fs = record.sample_rate_hz
    abp = np.asarray(record["abp"], dtype=np.float64) if record.has("abp") else None
    ann = annotation
    has_landmarks = ann.ppg_feet >= 0

    rows, sbp, dbp, times = [], [], [], []
    dropped = 0
    for i in range(1, ann.n_cycles - 1):
        if not (ann.retained[i] and has_landmarks[i - 1] and has_landmarks[i + 1]):
            continue
        row = _cycle_features(i, ann, ecg, ppg, fs, fe_params)
        s, e = ann.cycles[i]
        if abp is not None:
            hi, lo = abp[s:e].max(), abp[s:e].min()
        else:
            hi = lo = np.nan
        ok = np.all(np.isfinite(row))
        if abp is not None:
            ok = ok and SBP_RANGE[0] <= hi <= SBP_RANGE[1] and DBP_RANGE[0] <= lo <= DBP_RANGE[1]
        if not ok:
            dropped += 1
            continue
        rows.append(row)
        sbp.append(hi)
        dbp.append(lo)
        times.append(s / fs)
    if dropped:
        log.info("%s: dropped %d cycles with invalid features or targets", record.subject_id, dropped)
    if len(rows) < 3:
        raise TooFewCycles(f"{record.subject_id}: only {len(rows)} usable cycles")
    return CycleFeatureSeries(record.subject_id, np.asarray(rows), sbp, dbp, times)


def record_to_series(record, fe_params=FuzzyEntropyParams(), ecg_spec=None, ppg_spec=None):
    """Filter, segment and extract features from a raw record."""
    ecg, ppg, ann = annotate(record, ecg_spec, ppg_spec)
    return extract_features(record, ann, filtered=(ecg, ppg), fe_params=fe_params)
