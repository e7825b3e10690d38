"""INI run configuration: defaults, file loading, overrides and typed views.

Every key is optional. Unknown sections or keys are rejected so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import copy
import os

from .dsp import FilterSpec
from .errors import ConfigError
from .features import FuzzyEntropyParams
from .model import TabNetConfig
from .training import HORIZON_GRID, TRAIN_CYCLES_GRID, ExperimentSpec, derive_seed
from .waveform import SynthSpec

ENV_VAR = "TABFORECAST_CONFIG"

DEFAULTS = {
    "synth": {
        "subjects": 3,
        "n_beats": 440,
        "base_hr_bpm": 72.0,
        "hr_drift": 0.1,
        "pat_to_bp_gain": 0.5,
        "bp_baseline_mmHg": 120.0,
        "noise_sd": 2.0,
        "sample_rate_hz": 1000.0,
        "pat_base_ms": 200.0,
    },
    "filter": {
        "ecg_low_hz": 5.0,
        "ecg_high_hz": 40.0,
        "ppg_cutoff_hz": 10.0,
        "order": 4,
    },
    "features": {
        "fuzzy_m": 2,
        "fuzzy_r_frac": 0.2,
        "fuzzy_n": 2.0,
    },
    "model": {
        "d_model": 32,
        "n_layers": 2,
        "top_k": 5,
        "inception_kernels": (1, 3, 5),
        "attention_bottleneck_ratio": 4,
        "attention_sigmoid": False,
    },
    "experiment": {
        "seed": 0,
        "train_cycles": 420,
        "input_length": 30,
        "forecast_length": 5,
        "split": (0.7, 0.1, 0.2),
        "epochs": 10,
        "batch_size": 4,
        "lr": 1e-4,
        "grid_train_cycles": TRAIN_CYCLES_GRID,
        "grid_horizons": HORIZON_GRID,
    },
}


def _parse(value, like, where):
    text = value.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            cast = type(like[0])
            return tuple(cast(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(like).__name__}") from None
    return text


class RunConfig:
    """Resolved configuration; ``values[section][key]`` holds typed values."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (bp_baseline_mmHg)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                like = cfg._default(section, key)
                cfg.values[section][key] = _parse(raw, like, f"{path} [{section}] {key}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None):
        """Config from ``path``, else from $TABFORECAST_CONFIG, else defaults."""
        path = path or os.environ.get(ENV_VAR)
        return cls.from_file(path) if path else cls()

    def _default(self, section, key):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        return DEFAULTS[section][key]

    def set(self, section, key, value):
        like = self._default(section, key)
        if isinstance(value, str) and not isinstance(like, str):
            value = _parse(value, like, f"[{section}] {key}")
        elif isinstance(like, tuple):
            value = tuple(type(like[0])(v) for v in value)
        elif isinstance(like, bool):
            value = bool(value)
        elif isinstance(like, (int, float)):
            value = type(like)(value)
        self.values[section][key] = value
        return self

    def get(self, section, key):
        self._default(section, key)
        return self.values[section][key]

    def validate(self):
        self.model_config().validate()
        self.experiment_spec()
        self.filter_specs(self.get("synth", "sample_rate_hz"))
        self.synth_spec(0).validate()
        if self.get("synth", "subjects") < 1:
            raise ConfigError("[synth] subjects must be >= 1")
        return self

    def to_dict(self):
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in items.items()}
                for s, items in self.values.items()}

    def to_ini(self):
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            for key, value in items.items():
                if isinstance(value, tuple):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    # typed views

    def synth_spec(self, index):
        s = self.values["synth"]
        seed = derive_seed(self.get("experiment", "seed"), "synth", index)
        return SynthSpec(
            seed=seed, n_beats=s["n_beats"], base_hr_bpm=s["base_hr_bpm"], hr_drift=s["hr_drift"],
            pat_to_bp_gain=s["pat_to_bp_gain"], bp_baseline_mmHg=s["bp_baseline_mmHg"], noise_sd=s["noise_sd"],
            sample_rate_hz=s["sample_rate_hz"], pat_base_ms=s["pat_base_ms"], subject_id=f"subject_{index:02d}",
        )

    def filter_specs(self, sample_rate_hz):
        f = self.values["filter"]
        ecg = FilterSpec("bandpass", f["ecg_high_hz"], sample_rate_hz, low_cut_hz=f["ecg_low_hz"], order=f["order"])
        ppg = FilterSpec("lowpass", f["ppg_cutoff_hz"], sample_rate_hz, order=f["order"])
        ecg.validate()
        ppg.validate()
        return ecg, ppg

    def fuzzy_params(self):
        f = self.values["features"]
        return FuzzyEntropyParams(m=f["fuzzy_m"], r_frac=f["fuzzy_r_frac"], n=f["fuzzy_n"])

    def model_config(self, forecast_length=None):
        m, e = self.values["model"], self.values["experiment"]
        return TabNetConfig(
            input_length=e["input_length"], forecast_length=forecast_length or e["forecast_length"],
            d_model=m["d_model"], n_layers=m["n_layers"], top_k=m["top_k"],
            inception_kernels=m["inception_kernels"], attention_bottleneck_ratio=m["attention_bottleneck_ratio"],
            attention_sigmoid=m["attention_sigmoid"], lr=e["lr"], batch_size=e["batch_size"], epochs=e["epochs"],
            seed=e["seed"],
        )

    def experiment_spec(self, train_cycles=None, horizons=None):
        e = self.values["experiment"]
        spec = ExperimentSpec(
            train_cycles=train_cycles or e["train_cycles"], input_length=e["input_length"],
            horizons=horizons or (e["forecast_length"],), split=e["split"], epochs=e["epochs"],
            batch_size=e["batch_size"], lr=e["lr"], seed=e["seed"],
        )
        spec.validate()
        return spec
