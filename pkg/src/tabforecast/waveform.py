"""Synchronised ECG/PPG/ABP records: validation, CSV/binary I/O, synthesis."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import (
    CorruptPayload,
    InvalidSpec,
    MissingChannel,
    NonMonotonicTime,
    UnparseableRow,
    VersionMismatch,
)

log = logging.getLogger(__name__)

CHANNELS = ("ecg", "ppg", "abp")
NATIVE_RATES = (125.0, 250.0, 1000.0)
BINARY_MAGIC = b"TFWF"
BINARY_VERSION = 1


@dataclass(frozen=True)
class WaveformRecord:
    subject_id: str
    sample_rate_hz: float
    channels: dict
    n_rejected: int = 0

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise InvalidSpec(f"sample rate must be positive, got {self.sample_rate_hz}")
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise InvalidSpec(f"unknown channels {sorted(unknown)}")
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) != 1:
            raise InvalidSpec(f"channel lengths differ: { {k: len(v) for k, v in self.channels.items()} }")
        if lengths.pop() < 2:
            raise InvalidSpec("a record needs at least 2 samples")
        chans = {}
        for name in CHANNELS:
            if name in self.channels:
                arr = np.ascontiguousarray(self.channels[name], dtype=np.float32)
                if not np.all(np.isfinite(arr)):
                    raise InvalidSpec(f"channel {name!r} has non-finite samples")
                arr.setflags(write=False)
                chans[name] = arr
        object.__setattr__(self, "channels", chans)
        if self.sample_rate_hz not in NATIVE_RATES:
            log.debug("non-native sample rate %s Hz accepted", self.sample_rate_hz)

    def __len__(self):
        return len(next(iter(self.channels.values())))

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz

    def has(self, name):
        return name in self.channels

    def __getitem__(self, name):
        try:
            return self.channels[name]
        except KeyError:
            raise MissingChannel(f"record {self.subject_id!r} has no {name!r} channel") from None


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    return "binary" if Path(path).suffix.lower() in (".bin", ".tfwf") else "csv"


# ---------------------------------------------------------------------------
# CSV


def _parse_rate(line):
    line = line.strip().lstrip("#").strip()
    key, _, value = line.partition("=")
    if key.strip() != "sample_rate_hz":
        return None
    return float(value)


def load_record(path, format=None, sample_rate_hz=None, subject_id=None):
    """Read a record written by :func:`save_record` (or a compatible CSV).

    CSV rows containing NaN/Inf are dropped and counted in ``n_rejected``.
    Channels are truncated to the shortest one.
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "binary":
        return _load_binary(path, subject_id)
    if fmt != "csv":
        raise InvalidSpec(f"unknown record format {fmt!r}")

    text = path.read_text()
    lines = text.splitlines()
    rate = sample_rate_hz
    start = 0
    if lines and lines[0].startswith("#"):
        parsed = _parse_rate(lines[0])
        if rate is None:
            rate = parsed
        start = 1
    if rate is None:
        raise InvalidSpec(f"{path}: no '# sample_rate_hz=' line and no sample rate given")

    reader = csv.reader(io.StringIO("\n".join(lines[start:])))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise MissingChannel(f"{path}: empty file") from None
    for name in ("ecg", "ppg"):
        if name not in header:
            raise MissingChannel(f"{path}: column {name!r} missing from header {header}")
    cols = {name: header.index(name) for name in ("time",) + CHANNELS if name in header}

    values = {name: [] for name in cols}
    ended = set()
    rejected = 0
    for offset, row in enumerate(reader):
        line_no = start + 2 + offset
        if not row or all(not c.strip() for c in row):
            continue
        parsed = {}
        for name, idx in cols.items():
            cell = row[idx].strip() if idx < len(row) else ""
            if cell == "":
                ended.add(name)
                continue
            if name in ended:
                raise UnparseableRow(line_no, f"value for {name!r} after the channel ended")
            try:
                parsed[name] = float(cell)
            except ValueError:
                raise UnparseableRow(line_no, f"cannot parse {cell!r} in column {name!r}") from None
        if not all(math.isfinite(v) for v in parsed.values()):
            rejected += 1
            continue
        for name, v in parsed.items():
            values[name].append(v)
    if rejected:
        log.warning("%s: rejected %d rows with NaN/Inf samples", path, rejected)

    if "time" in values:
        t = np.asarray(values.pop("time"))
        if t.size > 1 and np.any(np.diff(t) <= 0):
            bad = int(np.argmax(np.diff(t) <= 0)) + 1
            raise NonMonotonicTime(f"{path}: time not strictly increasing at sample {bad}")
    n = min(len(v) for v in values.values())
    chans = {name: np.asarray(v[:n], dtype=np.float32) for name, v in values.items()}
    return WaveformRecord(subject_id or path.stem, float(rate), chans, n_rejected=rejected)


def _save_csv(record, path):
    names = [c for c in CHANNELS if record.has(c)]
    buf = io.StringIO()
    buf.write(f"# sample_rate_hz={record.sample_rate_hz!r}\n")
    buf.write(",".join(["time"] + names) + "\n")
    fs = record.sample_rate_hz
    cols = [record[c] for c in names]
    for i in range(len(record)):
        # 9 significant digits round-trip float32 exactly
        buf.write(f"{i / fs:.9g}," + ",".join(f"{float(c[i]):.9g}" for c in cols) + "\n")
    atomic_write_bytes(path, buf.getvalue().encode())


# ---------------------------------------------------------------------------
# binary


def _save_binary(record, path):
    sid = record.subject_id.encode()
    parts = [BINARY_MAGIC, struct.pack("<H", BINARY_VERSION), struct.pack("<d", record.sample_rate_hz),
             struct.pack("<H", len(sid)), sid]
    names = [c for c in CHANNELS if record.has(c)]
    parts.append(struct.pack("<H", len(names)))
    for name in names:
        data = np.ascontiguousarray(record[name], dtype="<f4")
        parts += [struct.pack("<B", len(name)), name.encode(), struct.pack("<I", data.size), data.tobytes()]
    atomic_write_bytes(path, b"".join(parts))


def _load_binary(path, subject_id=None):
    blob = Path(path).read_bytes()
    if blob[:4] != BINARY_MAGIC:
        raise CorruptPayload(f"{path}: bad magic")
    try:
        (version,) = struct.unpack_from("<H", blob, 4)
        if version != BINARY_VERSION:
            raise VersionMismatch(f"{path}: record version {version}")
        (rate,) = struct.unpack_from("<d", blob, 6)
        (n,) = struct.unpack_from("<H", blob, 14)
        sid = blob[16:16 + n].decode()
        pos = 16 + n
        (n_chan,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        chans = {}
        for _ in range(n_chan):
            (ln,) = struct.unpack_from("<B", blob, pos)
            name = blob[pos + 1:pos + 1 + ln].decode()
            pos += 1 + ln
            (count,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + 4 * count > len(blob):
                raise CorruptPayload(f"{path}: channel {name!r} truncated")
            chans[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CorruptPayload(f"{path}: truncated header") from exc
    for name in ("ecg", "ppg"):
        if name not in chans:
            raise MissingChannel(f"{path}: channel {name!r} missing")
    n = min(len(v) for v in chans.values())
    return WaveformRecord(subject_id or sid, rate, {k: v[:n] for k, v in chans.items()})


def save_record(record, path, format=None):
    fmt = _infer_format(path, format)
    if fmt == "csv":
        _save_csv(record, path)
    elif fmt == "binary":
        _save_binary(record, path)
    else:
        raise InvalidSpec(f"unknown record format {fmt!r}")


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic subject.

    Heart rate and pulse arrival time (PAT) follow a shared slow "drive"
    process scaled by ``hr_drift``; SBP falls linearly with PAT at
    ``pat_to_bp_gain`` mmHg per ms, plus white noise of ``noise_sd`` mmHg.
    ``noise_sd`` also sets a small additive noise on ECG and PPG.
    """

    seed: int = 0
    n_beats: int = 120
    base_hr_bpm: float = 72.0
    hr_drift: float = 0.1
    pat_to_bp_gain: float = 0.5
    bp_baseline_mmHg: float = 120.0
    noise_sd: float = 1.0
    sample_rate_hz: float = 1000.0
    pat_base_ms: float = 200.0
    subject_id: str = ""

    def validate(self):
        if self.n_beats < 10:
            raise InvalidSpec("n_beats must be >= 10")
        if not 40 <= self.base_hr_bpm <= 180:
            raise InvalidSpec("base_hr_bpm must lie in [40, 180]")
        if not self.sample_rate_hz > 80:
            raise InvalidSpec("sample_rate_hz must exceed 80 Hz")
        if self.noise_sd < 0 or self.hr_drift < 0 or not 0 <= self.hr_drift < 0.5:
            raise InvalidSpec("noise_sd must be >= 0 and hr_drift in [0, 0.5)")
        if not 50 <= self.pat_base_ms <= 400:
            raise InvalidSpec("pat_base_ms must lie in [50, 400]")
        if self.seed < 0:
            raise InvalidSpec("seed must be unsigned")


PPG_RISE_S = 0.150  # half of the 300 ms raised-cosine pulse
PPG_RUNOFF_TAU_S = 0.35
ECG_SIGMA_S = 0.012


def _slow_drive(rng, n):
    """Smooth zero-mean process in [-1, 1] built from two slow sinusoids."""
    i = np.arange(n)
    p1, p2 = rng.uniform(80, 160), rng.uniform(25, 50)
    f1, f2 = rng.uniform(0, 2 * np.pi, size=2)
    return 0.65 * np.sin(2 * np.pi * i / p1 + f1) + 0.35 * np.sin(2 * np.pi * i / p2 + f2)


def _ppg_kernel(t):
    """Raised-cosine upstroke to 1 at 150 ms, then exponential run-off."""
    out = np.zeros_like(t)
    rise = (t >= 0) & (t < PPG_RISE_S)
    out[rise] = 0.5 * (1.0 - np.cos(np.pi * t[rise] / PPG_RISE_S))
    fall = t >= PPG_RISE_S
    out[fall] = np.exp(-(t[fall] - PPG_RISE_S) / PPG_RUNOFF_TAU_S)
    return out


def _abp_plateau(u):
    """Flat-topped pulse over a cycle phase u in [0, 1): 0 outside, 1 on the plateau."""
    out = np.zeros_like(u)
    up = (u >= 0.1) & (u < 0.2)
    out[up] = 0.5 * (1 - np.cos(np.pi * (u[up] - 0.1) / 0.1))
    out[(u >= 0.2) & (u < 0.4)] = 1.0
    down = (u >= 0.4) & (u < 0.5)
    out[down] = 0.5 * (1 + np.cos(np.pi * (u[down] - 0.4) / 0.1))
    return out


@dataclass(frozen=True)
class SynthTruth:
    """Per-beat ground truth behind a synthetic record."""

    r_times_s: np.ndarray
    rr_s: np.ndarray
    pat_ms: np.ndarray
    sbp: np.ndarray
    dbp: np.ndarray


def synthesize(spec):
    """Generate a record together with its per-beat ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    fs = spec.sample_rate_hz
    n = spec.n_beats

    hr_drive = _slow_drive(rng, n)
    bp_drive = 0.6 * hr_drive + 0.4 * _slow_drive(rng, n)
    hr = spec.base_hr_bpm * (1.0 + spec.hr_drift * hr_drive)
    rr = 60.0 / hr
    pat_ms = spec.pat_base_ms * (1.0 - spec.hr_drift * bp_drive)
    bp_noise = rng.normal(0.0, 1.0, size=n) * spec.noise_sd
    sbp = spec.bp_baseline_mmHg - spec.pat_to_bp_gain * (pat_ms - pat_ms.mean()) + bp_noise
    dbp = spec.bp_baseline_mmHg * 2.0 / 3.0 + 0.5 * (sbp - spec.bp_baseline_mmHg)

    lead_in = 0.5
    r_times = lead_in + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    duration = r_times[-1] + rr[-1] + 0.5
    n_samples = int(round(duration * fs))
    t = np.arange(n_samples) / fs

    ecg = np.zeros(n_samples)
    ppg = np.zeros(n_samples)
    abp = np.full(n_samples, dbp[0])
    for i, r in enumerate(r_times):
        lo = max(0, int((r - 5 * ECG_SIGMA_S) * fs))
        hi = min(n_samples, int((r + 5 * ECG_SIGMA_S) * fs) + 2)
        ecg[lo:hi] += np.exp(-0.5 * ((t[lo:hi] - r) / ECG_SIGMA_S) ** 2)

        foot = r + pat_ms[i] / 1000.0
        lo = max(0, int(foot * fs))
        hi = min(n_samples, int((foot + 8 * PPG_RUNOFF_TAU_S) * fs))
        ppg[lo:hi] += _ppg_kernel(t[lo:hi] - foot)

        lo = int(np.ceil(r * fs))
        hi = min(n_samples, int(np.ceil((r + rr[i]) * fs)))
        u = (t[lo:hi] - r) / rr[i]
        abp[lo:hi] = dbp[i] + (sbp[i] - dbp[i]) * _abp_plateau(u)

    # run-off of a virtual preceding beat so the first cycle also has a foot
    foot = r_times[0] - rr[0] + pat_ms[0] / 1000.0
    hi = min(n_samples, int((foot + 8 * PPG_RUNOFF_TAU_S) * fs))
    ppg[:hi] += _ppg_kernel(t[:hi] - foot)

    if spec.noise_sd > 0:
        ecg += rng.normal(0.0, 0.004 * spec.noise_sd, size=n_samples)
        ppg += rng.normal(0.0, 0.002 * spec.noise_sd, size=n_samples)

    record = WaveformRecord(
        subject_id=spec.subject_id or f"synth-{spec.seed}",
        sample_rate_hz=fs,
        channels={"ecg": ecg, "ppg": ppg, "abp": abp},
    )
    return record, SynthTruth(r_times_s=r_times, rr_s=rr, pat_ms=pat_ms, sbp=sbp, dbp=dbp)


def generate_synthetic(spec):
    """Deterministic synthetic ECG/PPG/ABP record for ``spec``."""
    return synthesize(spec)[0]
