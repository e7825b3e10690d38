"""ECG/PPG denoising, R-peak detection and heartbeat segmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from ._io import atomic_write_text
from .errors import InvalidCutoff, NoBeatsFound, SignalTooShort

log = logging.getLogger(__name__)

ECG_BAND_HZ = (5.0, 40.0)
PPG_LOWPASS_HZ = 10.0
DEFAULT_ORDER = 4
HR_RANGE_BPM = (30.0, 220.0)
REFRACTORY_S = 0.25
MIN_PULSE_FRACTION = 0.1


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    high_cut_hz: float
    sample_rate_hz: float
    low_cut_hz: float | None = None
    order: int = DEFAULT_ORDER

    def validate(self):
        nyq = self.sample_rate_hz / 2.0
        if self.order < 1:
            raise InvalidCutoff("filter order must be positive")
        if self.kind == "bandpass":
            if self.low_cut_hz is None or not 0 < self.low_cut_hz < self.high_cut_hz < nyq:
                raise InvalidCutoff(
                    f"bandpass needs 0 < low ({self.low_cut_hz}) < high ({self.high_cut_hz}) < Nyquist ({nyq})")
        elif self.kind == "lowpass":
            if not 0 < self.high_cut_hz < nyq:
                raise InvalidCutoff(f"lowpass needs 0 < cutoff ({self.high_cut_hz}) < Nyquist ({nyq})")
        else:
            raise InvalidCutoff(f"unknown filter kind {self.kind!r}")


@dataclass(frozen=True)
class FilterCoefficients:
    sos: np.ndarray  # second-order sections
    order: int
    spec: FilterSpec

    def gain_db(self, freqs_hz):
        """Single-pass magnitude response in dB at ``freqs_hz``."""
        _, h = sps.sosfreqz(self.sos, worN=np.atleast_1d(freqs_hz), fs=self.spec.sample_rate_hz)
        return 20 * np.log10(np.maximum(np.abs(h), 1e-300))


def ecg_filter_spec(fs):
    return FilterSpec("bandpass", ECG_BAND_HZ[1], fs, low_cut_hz=ECG_BAND_HZ[0])


def ppg_filter_spec(fs):
    return FilterSpec("lowpass", PPG_LOWPASS_HZ, fs)


def design_filter(spec):
    """Butterworth filter in second-order sections."""
    spec.validate()
    if spec.kind == "bandpass":
        sos = sps.butter(spec.order, [spec.low_cut_hz, spec.high_cut_hz], btype="bandpass",
                         fs=spec.sample_rate_hz, output="sos")
    else:
        sos = sps.butter(spec.order, spec.high_cut_hz, btype="lowpass", fs=spec.sample_rate_hz, output="sos")
    return FilterCoefficients(sos=sos, order=spec.order, spec=spec)


def apply_filter(x, coeffs):
    """Zero-phase (forward-backward) filtering; output length equals input length."""
    x = np.asarray(x, dtype=np.float64)
    if x.size <= 3 * coeffs.order:
        raise SignalTooShort(f"signal of {x.size} samples too short for order {coeffs.order}")
    padlen = min(x.size - 1, 3 * (2 * coeffs.sos.shape[0] + 1))
    return sps.sosfiltfilt(coeffs.sos, x, padlen=padlen)


def preprocess(record, ecg_spec=None, ppg_spec=None):
    """Filtered (ecg, ppg) arrays for a record.

    Defaults are a 5-40 Hz bandpass for ECG and a 10 Hz lowpass for PPG,
    both order 4 at the record's sample rate.
    """
    fs = record.sample_rate_hz
    ecg = apply_filter(record["ecg"], design_filter(ecg_spec or ecg_filter_spec(fs)))
    ppg = apply_filter(record["ppg"], design_filter(ppg_spec or ppg_filter_spec(fs)))
    return ecg, ppg


# ---------------------------------------------------------------------------
# beats


@dataclass
class BeatAnnotation:
    """R-peaks, per-cycle PPG landmarks and the retained-cycle mask.

    ``cycles[i]`` is ``(r_peaks[i], r_peaks[i + 1])``; landmark arrays are
    aligned with ``cycles`` and hold -1 where a landmark is missing.
    """

    r_peaks: np.ndarray
    cycles: np.ndarray
    ppg_feet: np.ndarray
    ppg_peaks: np.ndarray
    ppg_max_slopes: np.ndarray
    retained: np.ndarray
    sample_rate_hz: float
    exclusions: dict = field(default_factory=dict)

    @property
    def n_cycles(self):
        return len(self.cycles)

    @property
    def n_excluded(self):
        return int((~self.retained).sum())

    def to_csv(self, path):
        lines = ["cycle_idx,r_peak,ppg_foot,ppg_peak,ppg_max_slope,retained"]
        for i, (s, _) in enumerate(self.cycles):
            lines.append(f"{i},{s},{self.ppg_feet[i]},{self.ppg_peaks[i]},{self.ppg_max_slopes[i]},{int(self.retained[i])}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def detect_r_peaks(ecg, fs):
    """Pan-Tompkins-style R-peak detector on a bandpassed ECG.

    Squared derivative -> 150 ms moving integration -> adaptive threshold
    between running signal and noise peak levels, with a 250 ms refractory
    period. Each accepted peak is refined to the filtered-ECG maximum
    within +-100 ms.
    """
    ecg = np.asarray(ecg, dtype=np.float64)
    deriv = np.gradient(ecg)
    energy = deriv * deriv
    win = max(1, int(round(0.150 * fs)))
    mwi = np.convolve(energy, np.ones(win) / win, mode="same")
    if not np.any(mwi > 0):
        return np.array([], dtype=np.int64)

    refractory = max(1, int(round(REFRACTORY_S * fs)))
    cand, _ = sps.find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return np.array([], dtype=np.int64)

    learn = mwi[: int(2 * fs)] if mwi.size > 2 * fs else mwi
    spki = 0.25 * learn.max()
    npki = 0.5 * learn.mean()
    accepted = []
    for p in cand:
        level = mwi[p]
        threshold = npki + 0.25 * (spki - npki)
        if level > threshold:
            accepted.append(p)
            spki = 0.125 * level + 0.875 * spki
        else:
            npki = 0.125 * level + 0.875 * npki

    half = int(round(0.1 * fs))
    refined = []
    for p in accepted:
        lo, hi = max(0, p - half), min(ecg.size, p + half + 1)
        r = lo + int(np.argmax(ecg[lo:hi]))
        if refined and r - refined[-1] < refractory:
            if ecg[r] > ecg[refined[-1]]:
                refined[-1] = r
            continue
        refined.append(r)
    return np.asarray(refined, dtype=np.int64)


def detect_beats(ecg, ppg, sample_rate_hz):
    """Segment filtered ECG/PPG into R-to-R cycles and locate PPG landmarks.

    A cycle is excluded (``retained`` False) if its implied heart rate is
    outside 30-220 bpm, a PPG landmark is missing, or its PPG pulse
    amplitude is below 10% of the record median.
    """
    ecg = np.asarray(ecg, dtype=np.float64)
    ppg = np.asarray(ppg, dtype=np.float64)
    fs = float(sample_rate_hz)
    if ecg.size < 2 * fs or ppg.size != ecg.size:
        raise SignalTooShort("detect_beats needs >= 2 s of equally long ECG and PPG")
    r = detect_r_peaks(ecg, fs)
    if r.size < 2:
        raise NoBeatsFound(f"found {r.size} R-peaks; need at least 2")

    cycles = np.stack([r[:-1], r[1:]], axis=1)
    n = len(cycles)
    feet = np.full(n, -1, dtype=np.int64)
    peaks = np.full(n, -1, dtype=np.int64)
    slopes = np.full(n, -1, dtype=np.int64)
    retained = np.ones(n, dtype=bool)
    reasons = {"heart_rate": 0, "ppg_landmark": 0, "ppg_amplitude": 0}

    for i, (s, e) in enumerate(cycles):
        hr = 60.0 * fs / (e - s)
        if not HR_RANGE_BPM[0] <= hr <= HR_RANGE_BPM[1]:
            retained[i] = False
            reasons["heart_rate"] += 1
            continue
        seg = ppg[s:e]
        pk = int(np.argmax(seg))
        if pk == 0:
            retained[i] = False
            reasons["ppg_landmark"] += 1
            continue
        ft = int(np.argmin(seg[:pk]))
        if pk - ft < 2:
            retained[i] = False
            reasons["ppg_landmark"] += 1
            continue
        sl = ft + int(np.argmax(np.diff(seg[ft:pk + 1])))
        feet[i], peaks[i], slopes[i] = s + ft, s + pk, s + sl

    ok = retained & (feet >= 0)
    if ok.any():
        amp = ppg[peaks[ok]] - ppg[feet[ok]]
        floor = MIN_PULSE_FRACTION * np.median(amp)
        for i in np.flatnonzero(ok):
            if ppg[peaks[i]] - ppg[feet[i]] < floor:
                retained[i] = False
                reasons["ppg_amplitude"] += 1
    if (~retained).any():
        log.info("excluded %d of %d cycles: %s", int((~retained).sum()), n, reasons)
    return BeatAnnotation(r_peaks=r, cycles=cycles, ppg_feet=feet, ppg_peaks=peaks, ppg_max_slopes=slopes,
                          retained=retained, sample_rate_hz=fs, exclusions=reasons)


def annotate(record, ecg_spec=None, ppg_spec=None):
    """Filter a record and detect its beats; returns (ecg_f, ppg_f, annotation)."""
    ecg, ppg = preprocess(record, ecg_spec, ppg_spec)
    return ecg, ppg, detect_beats(ecg, ppg, record.sample_rate_hz)
