"""TABNet: attention-gated inception blocks over FFT-period 2D foldings.

A window of ``input_length`` heartbeat cycles (38 features + SBP history)
is instance-normalised, embedded, stretched along time to
``input_length + forecast_length`` steps, passed through a stack of
residual TABBlocks, projected back to channel space and de-normalised.
The forecast is the SBP channel over the last ``forecast_length`` steps.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from ._io import atomic_write_bytes
from .errors import ConfigError, CorruptPayload, ShapeMismatch, SignalTooShort, VersionMismatch
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TABN"
CHECKPOINT_VERSION = 1
_SD_FLOOR = 1e-8


@dataclass
class TabNetConfig:
    input_length: int = 30
    forecast_length: int = 5
    n_features: int = 38
    channels: int = 39
    d_model: int = 32
    n_layers: int = 2
    top_k: int = 5
    inception_kernels: tuple = (1, 3, 5)
    attention_bottleneck_ratio: int = 4
    attention_sigmoid: bool = False
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.inception_kernels = tuple(int(k) for k in self.inception_kernels)
        self.validate()

    @property
    def total_length(self):
        return self.input_length + self.forecast_length

    def validate(self):
        if self.channels != self.n_features + 1:
            raise ConfigError(f"channels must equal n_features + 1 (SBP history), got {self.channels} vs {self.n_features}")
        if self.input_length < 2 or self.forecast_length < 1:
            raise ConfigError("input_length must be >= 2 and forecast_length >= 1")
        if not 1 <= self.top_k <= self.total_length // 2:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, {self.total_length // 2}]")
        if self.d_model < 8:
            raise ConfigError("d_model must be >= 8")
        if not self.inception_kernels or any(k < 1 or k % 2 == 0 for k in self.inception_kernels):
            raise ConfigError(f"inception kernels must be odd and positive: {self.inception_kernels}")
        if self.attention_bottleneck_ratio < 1 or self.d_model // self.attention_bottleneck_ratio < 1:
            raise ConfigError("attention_bottleneck_ratio must leave at least one hidden channel")
        if self.n_layers < 1 or self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ConfigError("n_layers, batch_size, epochs and lr must be positive")

    def to_dict(self):
        d = asdict(self)
        d["inception_kernels"] = list(self.inception_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# instance normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray  # True where the channel SD was below the floor


def normalize_in(x):
    """Standardise each channel over the time axis (axis -2).

    Channels whose SD is below 1e-8 are centred but not scaled, and flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] < 2:
        raise SignalTooShort("normalize_in needs at least 2 timesteps")
    mean = x.mean(axis=-2, keepdims=True)
    std = x.std(axis=-2, keepdims=True)
    flagged = std < _SD_FLOOR
    std = np.where(flagged, 1.0, std)
    return (x - mean) / std, NormStats(mean, std, flagged)


def de_normalize(x, stats):
    return np.asarray(x) * stats.std + stats.mean


def positional_encoding(T, d):
    pos = np.arange(T)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


@dataclass
class FeatureScaler:
    """Training-split z-score statistics for the feature channels.

    The trailing SBP channel is left in mmHg; ``target_scale`` (training
    SBP SD) defines the normalised units of the loss.
    """

    mean: np.ndarray
    std: np.ndarray
    target_scale: float

    def __post_init__(self):
        # f32 so a reloaded checkpoint reproduces forecasts bitwise
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        self.target_scale = float(np.float32(self.target_scale))

    @classmethod
    def fit(cls, features, sbp):
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        std = np.where(std < _SD_FLOOR, 1.0, std)
        scale = float(np.std(sbp))
        return cls(features.mean(axis=0), std, scale if scale > _SD_FLOOR else 1.0)

    def transform(self, channels):
        """Standardise the feature columns of (..., n_features + 1) inputs."""
        x = np.array(channels, dtype=np.float64)
        nf = self.mean.shape[0]
        if x.shape[-1] != nf + 1:
            raise ShapeMismatch(f"scaler expects {nf + 1} channels, got {x.shape[-1]}")
        x[..., :nf] = (x[..., :nf] - self.mean.astype(np.float64)) / self.std.astype(np.float64)
        return x

    def to_named(self):
        return {"scaler.mean": self.mean, "scaler.std": self.std,
                "scaler.target_scale": np.asarray([self.target_scale], dtype=np.float32)}

    @classmethod
    def from_named(cls, named):
        try:
            return cls(named["scaler.mean"], named["scaler.std"], float(named["scaler.target_scale"][0]))
        except KeyError as exc:
            raise CorruptPayload(f"incomplete scaler tensors: missing {exc}") from None


# ---------------------------------------------------------------------------
# period detection and 1D <-> 2D folding


@dataclass
class PeriodDecomposition:
    amplitudes: np.ndarray  # frequencies 1..T//2
    frequencies: list
    periods: list

    def amplitude_at(self, r):
        return float(self.amplitudes[r - 1])


def detect_periods(x, top_k):
    """Top-k frequencies of the channel-averaged amplitude spectrum.

    Ties go to the lower frequency; amplitudes indistinguishable from zero
    (relative to the signal's L1 mass) count as ties at zero, so a flat
    spectrum yields frequencies 1, 2, ... in order.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    T = data.shape[0]
    if T < 2 * top_k or T < 4:
        raise SignalTooShort(f"detect_periods: T={T} too short for top_k={top_k}")
    amp = tt.rfft_amplitude(data).data
    tol = 1e-9 * np.abs(data).sum(axis=0).mean()
    ranked = np.where(amp <= tol, 0.0, amp)
    order = np.argsort(-ranked, kind="stable")[:top_k]
    freqs = [int(i) + 1 for i in order]
    periods = [-(-T // r) for r in freqs]
    return PeriodDecomposition(amplitudes=amp, frequencies=freqs, periods=periods)


def reshape_to_2d(x, r, c):
    """Fold (T, d) into (d, c, r): column b holds timesteps b*c .. b*c + c - 1."""
    T, d = x.shape
    if c * r < T:
        raise ShapeMismatch(f"reshape_to_2d: c*r={c * r} < T={T}")
    if c * r > T:
        x = tt.pad(x, ((0, c * r - T), (0, 0)))
    return x.reshape(r, c, d).permute(2, 1, 0)


def restore_to_1d(x2d, T):
    """Inverse of :func:`reshape_to_2d`, truncated to the first ``T`` steps."""
    d, c, r = x2d.shape
    if c * r < T:
        raise ShapeMismatch(f"restore_to_1d: c*r={c * r} < T={T}")
    flat = x2d.permute(2, 1, 0).reshape(c * r, d)
    return flat if c * r == T else flat[:T]


def aggregate(branches, amplitudes):
    """Softmax(amplitudes)-weighted sum of equally shaped branches.

    The weights are constants: no gradient reaches the amplitudes.
    """
    if not branches:
        raise ShapeMismatch("aggregate needs at least one branch")
    amps = np.asarray(amplitudes, dtype=np.float64)
    if amps.shape != (len(branches),):
        raise ShapeMismatch(f"aggregate: {len(branches)} branches vs {amps.shape} amplitudes")
    z = np.exp(amps - amps.max())
    w = z / z.sum()
    if len(branches) == 1:
        return branches[0]
    out = tt.scale(branches[0], w[0])
    for wi, b in zip(w[1:], branches[1:]):
        out = out + tt.scale(b, wi)
    return out


# ---------------------------------------------------------------------------
# model


class TabNetModel:
    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.scaler = None  # set by training: feature standardisation stats
        self.last_norm_stats = None
        self._init_params()
        self._pe = {}
        self._period_cache = None

    # -- parameters --------------------------------------------------------

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        C, d, L, T = cfg.channels, cfg.d_model, cfg.input_length, cfg.total_length
        hidden = d // cfg.attention_bottleneck_ratio

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        p = {
            "embed.W": uniform((C, d), C),
            "embed.b": np.zeros(d),
            "time_extend.W": uniform((L, T), L),
            "time_extend.b": np.zeros(T),
        }
        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}."
            p[pre + "attn_a.W"] = uniform((hidden, d, 3, 3), d * 9)
            p[pre + "attn_a.b"] = np.zeros(hidden)
            p[pre + "attn_b.W"] = uniform((d, hidden, 3, 3), hidden * 9)
            p[pre + "attn_b.b"] = np.zeros(d)
            for k in cfg.inception_kernels:
                p[pre + f"branch{k}.W"] = uniform((d, d, k, k), d * k * k)
                p[pre + f"branch{k}.b"] = np.zeros(d)
        p["project.W"] = uniform((d, C), d)
        p["project.b"] = np.zeros(C)
        self.params = {name: Tensor(v, requires_grad=True, dtype=self.dtype, name=name) for name, v in p.items()}

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ShapeMismatch(f"parameter names differ (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {self.params[name].shape}")
        for name, arr in state.items():
            self.params[name].data = np.array(arr, dtype=self.dtype)

    def astype(self, dtype):
        """Copy of the model with parameters cast to ``dtype`` (e.g. f64 for gradient checks)."""
        other = TabNetModel.__new__(TabNetModel)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.scaler = self.scaler
        other.last_norm_stats = None
        other._pe = {}
        other._period_cache = None
        other.params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n) for n, p in self.params.items()}
        return other

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ---------------------------------------------------

    def embed(self, x):
        """Per-step linear map C -> d_model plus fixed sinusoidal positions."""
        if x.shape[-1] != self.config.channels:
            raise ShapeMismatch(f"embed: expected {self.config.channels} channels, got {x.shape[-1]}")
        h = tt.linear(x, self.params["embed.W"], self.params["embed.b"])
        return tt.shift(h, self._positions(x.shape[-2]))

    def _positions(self, T):
        if T not in self._pe:
            self._pe[T] = positional_encoding(T, self.config.d_model).astype(self.dtype)
        return self._pe[T]

    def time_extend(self, h):
        """Linear map along time, (B, L_in, d) -> (B, L_in + H, d)."""
        ht = h.permute(0, 2, 1)
        ht = tt.linear(ht, self.params["time_extend.W"], self.params["time_extend.b"])
        return ht.permute(0, 2, 1)

    def inception_kernel(self, layer):
        """Branch kernels zero-padded to the largest size and averaged.

        Averaging same-padded k x k convolutions equals one convolution with
        the averaged, centre-aligned kernels, so the branches run as a
        single conv while keeping their own parameters.
        """
        pre = f"layers.{layer}."
        kernels = self.config.inception_kernels
        kmax = max(kernels)
        K = b = None
        for k in kernels:
            Wk = self.params[pre + f"branch{k}.W"]
            edge = (kmax - k) // 2
            if edge:
                Wk = tt.pad(Wk, ((0, 0), (0, 0), (edge, edge), (edge, edge)))
            bk = self.params[pre + f"branch{k}.b"]
            K = Wk if K is None else K + Wk
            b = bk if b is None else b + bk
        inv = 1.0 / len(kernels)
        return tt.scale(K, inv), tt.scale(b, inv)

    def att_inception(self, x2d, layer, merged=None):
        """Attention-gated multi-kernel convolution; (n, d, c, r) or (d, c, r) in and out."""
        pre = f"layers.{layer}."
        P = self.params
        z = tt.conv2d(x2d, P[pre + "attn_a.W"], P[pre + "attn_a.b"])
        z = tt.relu(z)
        z = tt.conv2d(z, P[pre + "attn_b.W"], P[pre + "attn_b.b"])
        if self.config.attention_sigmoid:
            z = tt.sigmoid(z)
        gated = tt.mul(x2d, z)
        K, b = merged if merged is not None else self.inception_kernel(layer)
        return tt.conv2d(gated, K, b)

    def tabblock_forward(self, x, layer):
        """Residual TABBlock on (T, d) or (B, T, d).

        Each sample gets its own period decomposition; samples sharing a
        fold shape are convolved together.
        """
        unbatched = x.ndim == 2
        samples = [x] if unbatched else [x[b] for b in range(x.shape[0])]
        T = samples[0].shape[0]
        cache = self._period_cache
        if cache is not None and layer in cache:
            decomps = cache[layer]
        else:
            decomps = [detect_periods(s.data, self.config.top_k) for s in samples]
            if cache is not None:
                cache[layer] = decomps

        groups = {}
        for b, dec in enumerate(decomps):
            for i, (r, c) in enumerate(zip(dec.frequencies, dec.periods)):
                groups.setdefault((c, r), []).append((b, i))

        merged = self.inception_kernel(layer)
        branch_out = [[None] * self.config.top_k for _ in samples]
        for (c, r), members in groups.items():
            folded = [reshape_to_2d(samples[b], r, c) for b, _ in members]
            out = self.att_inception(tt.stack(folded), layer, merged)
            for j, (b, i) in enumerate(members):
                branch_out[b][i] = restore_to_1d(out[j], T)

        results = []
        for b, dec in enumerate(decomps):
            amps = [dec.amplitude_at(r) for r in dec.frequencies]
            results.append(samples[b] + aggregate(branch_out[b], amps))
        return results[0] if unbatched else tt.stack(results)

    @contextlib.contextmanager
    def frozen_periods(self):
        """Reuse the first forward's period decompositions for later forwards.

        Periods and aggregation weights are constants of each forward pass
        (no gradient flows through them); freezing them lets a finite-
        difference oracle evaluate exactly the function being differentiated.
        """
        self._period_cache = {}
        try:
            yield
        finally:
            self._period_cache = None

    # -- full forward ------------------------------------------------------

    def forward(self, x_window):
        """SBP forecast in mmHg: (L_in, C) -> (H,), or (B, L_in, C) -> (B, H)."""
        cfg = self.config
        x = np.asarray(x_window, dtype=np.float64)
        unbatched = x.ndim == 2
        if unbatched:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (cfg.input_length, cfg.channels):
            raise ShapeMismatch(f"forward: expected (B, {cfg.input_length}, {cfg.channels}), got {np.shape(x_window)}")
        xn, stats = normalize_in(x)
        self.last_norm_stats = stats
        h = self.embed(Tensor(xn.astype(self.dtype)))
        h = self.time_extend(h)
        for layer in range(cfg.n_layers):
            h = self.tabblock_forward(h, layer)
        out = tt.linear(h, self.params["project.W"], self.params["project.b"])
        sbp = out[:, cfg.input_length:, cfg.channels - 1]
        sd = stats.std[:, :, cfg.channels - 1].astype(self.dtype)
        mu = stats.mean[:, :, cfg.channels - 1].astype(self.dtype)
        y = tt.shift(tt.scale(sbp, sd), mu)
        return y[0] if unbatched else y

    __call__ = forward

    def predict(self, x_window):
        with tt.no_grad():
            return self.forward(x_window).data.astype(np.float64)

    def forecast(self, raw_window, batch_size=64):
        """Forecast from unscaled (…, L_in, C) windows, applying the stored feature scaler."""
        x = np.asarray(raw_window, dtype=np.float64)
        if self.scaler is not None:
            x = self.scaler.transform(x)
        if x.ndim == 2:
            return self.predict(x)
        return np.concatenate([self.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def inception_parameter_count(d_model, kernels):
    """Weights + biases of a d_model -> d_model inception layer with the given kernel set."""
    return sum(d_model * d_model * k * k + d_model for k in kernels)


def tabblock_parameter_count(d_model, kernels=(1, 3, 5), ratio=4):
    hidden = d_model // ratio
    attn = hidden * d_model * 9 + hidden + d_model * hidden * 9 + d_model
    return attn + inception_parameter_count(d_model, kernels)


# ---------------------------------------------------------------------------
# checkpoints


def _checkpoint_bytes(config_dict, named):
    cfg = json.dumps(config_dict, sort_keys=True).encode()
    manifest, payload = tt.pack_named(named)
    man = tt.manifest_bytes(manifest)
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<H", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg)), cfg,
        struct.pack("<I", len(man)), man,
        struct.pack("<Q", len(payload)), payload,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def _model_named(model):
    named = dict(model.state_dict())
    if model.scaler is not None:
        named.update(model.scaler.to_named())
    return named


def save_checkpoint(model, path):
    atomic_write_bytes(path, _checkpoint_bytes(model.config.to_dict(), _model_named(model)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 2 + 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptPayload(f"{path}: not a TABN checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < 4 + 2 + 4 + 4 + 8 + 4:
        raise CorruptPayload(f"{path}: truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptPayload(f"{path}: checksum mismatch (truncated or edited file)")
    pos = 6
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        cfg = json.loads(body[pos + 4:pos + 4 + n])
        pos += 4 + n
        (n,) = struct.unpack_from("<I", body, pos)
        manifest = json.loads(body[pos + 4:pos + 4 + n])
        pos += 4 + n
        (n,) = struct.unpack_from("<Q", body, pos)
        payload = body[pos + 8:pos + 8 + n]
    except (struct.error, ValueError) as exc:
        raise CorruptPayload(f"{path}: malformed header") from exc
    if len(payload) != n:
        raise CorruptPayload(f"{path}: payload shorter than declared")
    named = tt.unpack_named(manifest, payload)
    model = TabNetModel(TabNetConfig.from_dict(cfg))
    scaler_named = {k: v for k, v in named.items() if k.startswith("scaler.")}
    model.load_state_dict({k: v for k, v in named.items() if not k.startswith("scaler.")})
    if scaler_named:
        model.scaler = FeatureScaler.from_named(scaler_named)
    return model
