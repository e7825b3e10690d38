import json
import struct
import zlib

import numpy as np
import pytest

from gradcheck import check_op, model_gradcheck
from oracles import dft_top_k
from tabforecast import tensor as tt
from tabforecast.errors import ConfigError, CorruptPayload, ShapeMismatch, SignalTooShort
from tabforecast.model import (
    FeatureScaler,
    TabNetConfig,
    TabNetModel,
    _checkpoint_bytes,
    _model_named,
    aggregate,
    de_normalize,
    detect_periods,
    inception_parameter_count,
    load_checkpoint,
    normalize_in,
    positional_encoding,
    reshape_to_2d,
    restore_to_1d,
    save_checkpoint,
    tabblock_parameter_count,
)
from tabforecast.tensor import Tensor

SMALL = dict(d_model=8, input_length=12, forecast_length=4, top_k=2)


def small_model(seed=0, n_layers=1, dtype=np.float64, **kw):
    cfg = TabNetConfig(n_layers=n_layers, seed=seed, **{**SMALL, **kw})
    return TabNetModel(cfg, dtype=dtype)


class TestConfig:
    def test_defaults(self):
        c = TabNetConfig()
        assert (c.input_length, c.forecast_length, c.channels, c.top_k) == (30, 5, 39, 5)
        assert (c.batch_size, c.epochs, c.lr) == (4, 10, 1e-4)

    @pytest.mark.parametrize("kw", [
        dict(channels=40), dict(top_k=20), dict(d_model=4), dict(inception_kernels=(1, 2)), dict(epochs=0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TabNetConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        d = TabNetConfig().to_dict()
        d["bogus"] = 1
        with pytest.raises(ConfigError):
            TabNetConfig.from_dict(d)


class TestNormalize:
    def test_standardized_unchanged(self):
        x = np.random.default_rng(0).normal(size=(30, 5))
        x = (x - x.mean(0)) / x.std(0)
        y, _ = normalize_in(x)
        assert np.max(np.abs(y - x)) <= 1e-6

    def test_constant_channel_flagged(self):
        x = np.random.default_rng(1).normal(size=(20, 3))
        x[:, 1] = 7.0
        y, stats = normalize_in(x)
        assert stats.flagged[0, 1] and not stats.flagged[0, 0]
        np.testing.assert_array_equal(y[:, 1], 0.0)

    def test_round_trip(self):
        x = np.random.default_rng(2).normal(5.0, 3.0, size=(30, 39))
        y, stats = normalize_in(x)
        assert np.max(np.abs(de_normalize(y, stats) - x)) <= 1e-6
        np.testing.assert_allclose(y.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(0), 1.0, atol=1e-12)

    def test_batched(self):
        x = np.random.default_rng(3).normal(size=(4, 30, 39))
        y, _ = normalize_in(x)
        np.testing.assert_allclose(y[2], normalize_in(x[2])[0])


class TestEmbed:
    def test_zero_input_is_positional_encoding(self):
        m = small_model()
        out = m.embed(Tensor(np.zeros((16, 39))))
        np.testing.assert_array_equal(out.data, positional_encoding(16, 8))

    def test_shape(self):
        m = small_model()
        assert m.embed(Tensor(np.ones((3, 16, 39)))).shape == (3, 16, 8)
        with pytest.raises(ShapeMismatch):
            m.embed(Tensor(np.ones((16, 38))))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        m = small_model(seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(12, 39))

        def op(xt, W, b):
            m.params["embed.W"], m.params["embed.b"] = W, b
            return m.embed(xt)

        W, b = m.params["embed.W"].data.copy(), rng.normal(size=8)
        assert check_op(op, [x, W, b], seed) <= 1e-4


class TestDetectPeriods:
    def test_pure_tone(self):
        t = np.arange(64)
        d = detect_periods(np.sin(2 * np.pi * 4 * t / 64), 1)
        assert d.frequencies == [4] and d.periods == [16]

    def test_constant(self):
        d = detect_periods(np.full((40, 3), 2.5), 2)
        assert d.frequencies == [1, 2] and d.periods == [40, 20]

    def test_zero_input(self):
        d = detect_periods(np.zeros((17, 2)), 3)
        assert d.frequencies == [1, 2, 3] and d.periods == [17, 9, 6]

    def test_random_matches_dft_oracle(self):
        x = np.random.default_rng(7).normal(size=(50, 3))
        assert detect_periods(x, 5).frequencies == dft_top_k(x, 5)

    def test_invariants(self):
        rng = np.random.default_rng(8)
        for T in (8, 13, 34, 64):
            d = detect_periods(rng.normal(size=(T, 4)), 3)
            assert len(set(d.frequencies)) == 3
            for r, c in zip(d.frequencies, d.periods):
                assert 1 <= r <= T // 2 and c * r >= T and c == -(-T // r)
            assert np.all(d.amplitudes >= 0) and d.amplitudes.shape == (T // 2,)

    def test_too_short(self):
        with pytest.raises(SignalTooShort):
            detect_periods(np.ones((5, 2)), 3)


class TestFolding:
    def test_layout(self):
        x = Tensor(np.arange(12.0)[:, None])
        y = reshape_to_2d(x, 3, 4)
        assert y.shape == (1, 4, 3)
        for b in range(3):
            np.testing.assert_array_equal(y.data[0, :, b], [4 * b, 4 * b + 1, 4 * b + 2, 4 * b + 3])

    def test_padding(self):
        x = Tensor(np.arange(1.0, 11.0)[:, None])
        y = reshape_to_2d(x, 3, 4)
        np.testing.assert_array_equal(y.data[0, 2:, 2], [0.0, 0.0])
        np.testing.assert_array_equal(y.data[0, :2, 2], [9.0, 10.0])

    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        for T in (4, 7, 10, 31):
            x = rng.normal(size=(T, 3))
            for r in range(1, T // 2 + 1):
                c = -(-T // r)
                back = restore_to_1d(reshape_to_2d(Tensor(x), r, c), T)
                assert back.data.tobytes() == x.tobytes()

    def test_arange_oracle(self):
        T = 23
        x = np.arange(T * 2, dtype=np.float64).reshape(T, 2)
        np.testing.assert_array_equal(restore_to_1d(reshape_to_2d(Tensor(x), 5, 5), T).data, x)

    def test_padding_gets_no_gradient(self):
        T, r, c = 10, 3, 4
        folded = Tensor(np.random.default_rng(1).normal(size=(2, c, r)), requires_grad=True)
        out = restore_to_1d(folded, T)
        out.backward(np.ones(out.shape))
        np.testing.assert_array_equal(folded.grad[:, 2:, 2], 0.0)
        assert np.all(folded.grad[:, :2, 2] == 1.0)

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            reshape_to_2d(Tensor(np.zeros((10, 1))), 2, 4)
        with pytest.raises(ShapeMismatch):
            restore_to_1d(Tensor(np.zeros((1, 4, 2))), 9)


class TestAttInception:
    def test_zero_gate_gives_branch_biases(self):
        m = small_model()
        rng = np.random.default_rng(0)
        for k in m.config.inception_kernels:
            m.params[f"layers.0.branch{k}.b"].data = rng.normal(size=8)
        m.params["layers.0.attn_b.W"].data[:] = 0
        m.params["layers.0.attn_b.b"].data[:] = 0
        out = m.att_inception(Tensor(rng.normal(size=(8, 6, 5))), 0)
        bias = np.mean([m.params[f"layers.0.branch{k}.b"].data for k in (1, 3, 5)], axis=0)
        np.testing.assert_allclose(out.data, np.broadcast_to(bias[:, None, None], (8, 6, 5)), atol=1e-15)

    def test_merged_kernel_equals_branch_average(self):
        m = small_model(seed=3)
        x = Tensor(np.random.default_rng(3).normal(size=(8, 6, 5)))
        merged = m.att_inception(x, 0).data
        P = m.params
        z = tt.conv2d(tt.relu(tt.conv2d(x, P["layers.0.attn_a.W"], P["layers.0.attn_a.b"])),
                      P["layers.0.attn_b.W"], P["layers.0.attn_b.b"])
        gated = tt.mul(x, z)
        branches = [tt.conv2d(gated, P[f"layers.0.branch{k}.W"], P[f"layers.0.branch{k}.b"]).data for k in (1, 3, 5)]
        np.testing.assert_allclose(merged, np.mean(branches, axis=0), atol=1e-12)

    def test_shape_for_detected_folds(self):
        m = small_model()
        x = np.random.default_rng(4).normal(size=(16, 8))
        for r, c in zip(*(lambda d: (d.frequencies, d.periods))(detect_periods(x, 2))):
            folded = reshape_to_2d(Tensor(x), r, c)
            assert m.att_inception(folded, 0).shape == folded.shape

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient(self, seed):
        m = small_model(seed, d_model=4 * 2)
        rng = np.random.default_rng(seed)
        names = ["layers.0.attn_a.W", "layers.0.attn_a.b", "layers.0.attn_b.W", "layers.0.attn_b.b",
                 "layers.0.branch3.W", "layers.0.branch3.b"]
        arrays = [rng.normal(size=(8, 6, 5))] + [m.params[n].data + 0.1 * rng.normal(size=m.params[n].shape)
                                                 for n in names]

        def op(x, *ps):
            for n, p in zip(names, ps):
                m.params[n] = p
            return m.att_inception(x, 0)

        assert check_op(op, arrays, seed) <= 1e-4

    def test_sigmoid_variant(self):
        m = small_model(attention_sigmoid=True)
        m.params["layers.0.attn_b.W"].data[:] = 0
        m.params["layers.0.attn_b.b"].data[:] = 0
        x = np.random.default_rng(5).normal(size=(8, 6, 5))
        K, b = m.inception_kernel(0)
        expected = tt.conv2d(Tensor(0.5 * x), K, b).data  # sigmoid(0) = 0.5 gate
        np.testing.assert_allclose(m.att_inception(Tensor(x), 0).data, expected, atol=1e-14)


class TestAggregate:
    def test_singleton(self):
        b = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
        assert aggregate([b], [2.0]) is b

    def test_equal_amplitudes_average(self):
        rng = np.random.default_rng(1)
        bs = [Tensor(rng.normal(size=(6, 3))) for _ in range(5)]
        out = aggregate(bs, [1.5] * 5)
        np.testing.assert_allclose(out.data, np.mean([b.data for b in bs], axis=0), atol=1e-12)

    def test_softmax_oracle(self):
        rng = np.random.default_rng(2)
        bs = [rng.normal(size=(6, 3)) for _ in range(4)]
        a = rng.normal(size=4) * 3
        w = np.exp(a) / np.exp(a).sum()
        assert abs(w.sum() - 1) <= 1e-9 and np.all(w > 0)
        ref = sum(wi * b for wi, b in zip(w, bs))
        assert np.max(np.abs(aggregate([Tensor(b) for b in bs], a).data - ref)) <= 1e-9

    def test_mismatch(self):
        with pytest.raises(ShapeMismatch):
            aggregate([Tensor(np.zeros(3))] * 2, [1.0])


class TestTabBlock:
    def test_residual_identity(self):
        m = small_model(n_layers=2)
        for layer in range(2):
            for k in m.config.inception_kernels:
                m.params[f"layers.{layer}.branch{k}.W"].data[:] = 0
                m.params[f"layers.{layer}.branch{k}.b"].data[:] = 0
            m.params[f"layers.{layer}.attn_b.W"].data[:] = 0
            m.params[f"layers.{layer}.attn_b.b"].data[:] = 0
        x = Tensor(np.random.default_rng(0).normal(size=(3, 16, 8)))
        for layer in range(2):
            assert m.tabblock_forward(x, layer).data.tobytes() == x.data.tobytes()

    def test_shape(self):
        m = small_model()
        x = Tensor(np.random.default_rng(1).normal(size=(16, 8)))
        assert m.tabblock_forward(x, 0).shape == (16, 8)

    @pytest.mark.parametrize("seed", range(3))
    def test_input_gradient_with_frozen_periods(self, seed):
        m = small_model(seed)
        x = np.random.default_rng(seed).normal(size=(2, 16, 8))
        with m.frozen_periods():
            assert check_op(lambda a: m.tabblock_forward(a, 0), [x], seed) <= 1e-4

    def test_batched_equals_per_sample(self):
        m = small_model(seed=2)
        x = np.random.default_rng(2).normal(size=(4, 16, 8))
        batched = m.tabblock_forward(Tensor(x), 0).data
        for b in range(4):
            np.testing.assert_allclose(batched[b], m.tabblock_forward(Tensor(x[b]), 0).data, atol=1e-12)


class TestForward:
    def test_shape_and_finite(self):
        m = TabNetModel(TabNetConfig())
        y = m.predict(np.random.default_rng(0).normal(size=(30, 39)))
        assert y.shape == (5,) and np.all(np.isfinite(y))
        assert m.predict(np.random.default_rng(0).normal(size=(3, 30, 39))).shape == (3, 5)

    def test_constant_window_returns_channel_mean(self):
        m = TabNetModel(TabNetConfig())
        m.params["project.W"].data[:] = 0
        x = np.full((30, 39), 3.0)
        x[:, -1] = 118.25
        np.testing.assert_allclose(m.predict(x), 118.25, rtol=1e-6)

    def test_shape_error(self):
        with pytest.raises(ShapeMismatch):
            TabNetModel(TabNetConfig()).predict(np.zeros((29, 39)))

    def test_deterministic(self):
        x = np.random.default_rng(1).normal(size=(30, 39))
        a = TabNetModel(TabNetConfig(seed=4)).predict(x)
        b = TabNetModel(TabNetConfig(seed=4)).predict(x)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_end_to_end_gradient(self, seed):
        m = small_model(seed)
        rng = np.random.default_rng(100 + seed)
        for p in m.parameters():  # non-zero biases so every path is exercised
            if p.data.ndim == 1:
                p.data = 0.1 * rng.normal(size=p.shape)
        x = rng.normal(size=(2, 12, 39))
        y = rng.normal(size=(2, 4))
        errors = model_gradcheck(m, x, y, seed)
        assert max(errors.values()) <= 1e-4, errors

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_liveness(self, seed):
        m = small_model(seed, n_layers=2, dtype=np.float32)
        rng = np.random.default_rng(seed)
        loss = tt.mse_loss(m.forward(rng.normal(size=(2, 12, 39))), Tensor(rng.normal(size=(2, 4))))
        loss.backward()
        for name, p in m.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name


def test_parameter_count_below_six_kernel_inception():
    for d in (8, 32, 64):
        assert tabblock_parameter_count(d) < inception_parameter_count(d, (1, 3, 5, 7, 9, 11))
    m = TabNetModel(TabNetConfig())
    per_layer = sum(p.data.size for n, p in m.params.items() if n.startswith("layers.0."))
    assert per_layer == tabblock_parameter_count(32)


class TestCheckpoint:
    @pytest.fixture
    def trained_like(self):
        m = TabNetModel(TabNetConfig(seed=9))
        rng = np.random.default_rng(9)
        m.scaler = FeatureScaler.fit(rng.normal(size=(50, 38)), rng.normal(120, 5, size=50))
        return m, rng.normal(size=(30, 39))

    def test_round_trip_bitwise(self, trained_like, tmp_path):
        m, x = trained_like
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        for name, p in m.params.items():
            assert back.params[name].data.tobytes() == p.data.tobytes()
        assert back.forecast(x).tobytes() == m.forecast(x).tobytes()
        assert back.config == m.config

    def test_truncated(self, trained_like, tmp_path):
        m, _ = trained_like
        save_checkpoint(m, tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptPayload):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_flipped_byte(self, trained_like, tmp_path):
        m, _ = trained_like
        save_checkpoint(m, tmp_path / "m.ckpt")
        blob = bytearray((tmp_path / "m.ckpt").read_bytes())
        blob[-100] ^= 0xFF
        (tmp_path / "f.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CorruptPayload):
            load_checkpoint(tmp_path / "f.ckpt")

    def test_d_model_mismatch(self, trained_like, tmp_path):
        m, _ = trained_like
        cfg = m.config.to_dict()
        cfg["d_model"] = 16
        (tmp_path / "e.ckpt").write_bytes(_checkpoint_bytes(cfg, _model_named(m)))
        with pytest.raises(ShapeMismatch):
            load_checkpoint(tmp_path / "e.ckpt")

    def test_header_layout(self, trained_like, tmp_path):
        m, _ = trained_like
        save_checkpoint(m, tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        assert blob[:4] == b"TABN"
        (n,) = struct.unpack_from("<I", blob, 6)
        assert json.loads(blob[10:10 + n])["d_model"] == 32
        assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
