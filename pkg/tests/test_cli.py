import json

import numpy as np
import pytest

from tabforecast import __version__
from tabforecast.cli import main
from tabforecast.config import ENV_VAR, RunConfig
from tabforecast.features import CycleFeatureSeries
from tabforecast.model import load_checkpoint
from tabforecast.training import (
    baseline_linear,
    baseline_persistence,
    chronological_split,
    make_windows,
)
from tabforecast.waveform import load_record, synthesize

SMALL_INI = """\
[synth]
subjects = 2
n_beats = 130
sample_rate_hz = 250

[experiment]
train_cycles = 120
epochs = 2
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "small.ini"
    ini.write_text(SMALL_INI)
    assert run("--config", ini, "--seed", 1, "synth", "--out", root / "rec") == 0
    assert run("--config", ini, "features", "--in", root / "rec" / "subject_00.csv", "--out", root / "f0.csv") == 0
    assert run("--config", ini, "--seed", 1, "train", "--features", root / "f0.csv", "--out", root / "m.tabn") == 0
    return root, ini


class TestSynth:
    def test_deterministic(self, work, tmp_path):
        root, ini = work
        assert run("--config", ini, "--seed", 1, "synth", "--out", tmp_path) == 0
        for name in ("subject_00.csv", "subject_01.csv", "manifest.json"):
            assert (tmp_path / name).read_bytes() == (root / "rec" / name).read_bytes()

    def test_manifest_lists_subjects(self, work, tmp_path):
        _, ini = work
        assert run("--config", ini, "synth", "--out", tmp_path, "--subjects", 3) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        files = [s["file"] for s in manifest["subjects"]]
        assert len(files) == 3 and all((tmp_path / f).exists() for f in files)
        assert manifest["version"] == __version__
        assert manifest["config"]["synth"]["subjects"] == 3

    def test_matches_library_generator(self, work):
        root, ini = work
        cfg = RunConfig.load(ini)
        cfg.set("experiment", "seed", 1)
        record, _ = synthesize(cfg.synth_spec(0))
        back = load_record(root / "rec" / "subject_00.csv")
        assert np.max(np.abs(back["abp"] - record["abp"])) <= 1e-6

    def test_binary_format(self, work, tmp_path):
        _, ini = work
        assert run("--config", ini, "synth", "--out", tmp_path, "--subjects", 1, "--format", "binary") == 0
        assert load_record(tmp_path / "subject_00.bin").subject_id == "subject_00"


class TestFeatures:
    def test_header(self, work):
        root, _ = work
        assert len((root / "f0.csv").read_text().splitlines()[1].split(",")) == 41

    def test_rerun_identical(self, work, tmp_path):
        root, ini = work
        assert run("--config", ini, "features", "--in", root / "rec" / "subject_00.csv", "--out", tmp_path / "f.csv") == 0
        assert (tmp_path / "f.csv").read_bytes() == (root / "f0.csv").read_bytes()

    def test_matches_api(self, work):
        from tabforecast.features import record_to_series

        root, _ = work
        want = record_to_series(load_record(root / "rec" / "subject_00.csv"))
        got = CycleFeatureSeries.from_csv(root / "f0.csv")
        assert np.max(np.abs(got.features - want.features) / np.maximum(1.0, np.abs(want.features))) <= 1e-9
        assert np.max(np.abs(got.sbp - want.sbp)) <= 1e-9

    def test_missing_input_is_data_error(self, work, tmp_path):
        _, ini = work
        assert run("--config", ini, "features", "--in", tmp_path / "nope.csv", "--out", tmp_path / "f.csv") == 3


class TestTrain:
    def test_checkpoint_and_history(self, work):
        root, _ = work
        model = load_checkpoint(root / "m.tabn")
        hist = json.loads((root / "m.tabn.history.json").read_text())
        assert len(hist["history"]["train_loss"]) == 2
        assert hist["config"]["experiment"]["epochs"] == 2
        assert hist["version"] == __version__
        assert model.config.forecast_length == 5

    def test_same_seed_same_history(self, work, tmp_path):
        root, ini = work
        assert run("--config", ini, "--seed", 1, "train", "--features", root / "f0.csv", "--out", tmp_path / "m.tabn") == 0
        assert (tmp_path / "m.tabn.history.json").read_bytes() == (root / "m.tabn.history.json").read_bytes()
        assert (tmp_path / "m.tabn").read_bytes() == (root / "m.tabn").read_bytes()

    def test_epochs_flag_overrides_file(self, work, tmp_path):
        root, ini = work
        assert run("--config", ini, "train", "--features", root / "f0.csv", "--out", tmp_path / "m.tabn",
                   "--epochs", 1) == 0
        assert len(json.loads((tmp_path / "m.tabn.history.json").read_text())["history"]["train_loss"]) == 1


class TestForecast:
    def test_predictions(self, work, tmp_path):
        root, ini = work
        out = tmp_path / "fc.json"
        assert run("--config", ini, "forecast", "--checkpoint", root / "m.tabn", "--features", root / "f0.csv",
                   "--at", 40, "--out", out) == 0
        body = json.loads(out.read_text())
        pred = np.array(body["predictions"])
        assert pred.shape == (5,)
        assert np.all(np.isfinite(pred)) and np.all((pred >= 40) & (pred <= 260))
        assert len(body["truth"]) == 5

        model = load_checkpoint(root / "m.tabn")
        series = CycleFeatureSeries.from_csv(root / "f0.csv")
        want = model.forecast(series.channels()[10:40])
        assert np.max(np.abs(np.array(body["raw_predictions"]) - want)) <= 1e-9
        np.testing.assert_array_equal(body["truth"], series.sbp[40:45])

    def test_shorter_horizon_and_tail(self, work, tmp_path):
        root, ini = work
        n = len(CycleFeatureSeries.from_csv(root / "f0.csv"))
        out = tmp_path / "fc.json"
        assert run("--config", ini, "forecast", "--checkpoint", root / "m.tabn", "--features", root / "f0.csv",
                   "--at", n, "--horizon", 3, "--out", out) == 0
        body = json.loads(out.read_text())
        assert len(body["predictions"]) == 3 and body["truth"] is None

    @pytest.mark.parametrize("at", [29, 10_000])
    def test_index_out_of_range(self, work, at):
        root, ini = work
        assert run("--config", ini, "forecast", "--checkpoint", root / "m.tabn", "--features", root / "f0.csv",
                   "--at", at) == 3

    def test_horizon_beyond_checkpoint(self, work):
        root, ini = work
        assert run("--config", ini, "forecast", "--checkpoint", root / "m.tabn", "--features", root / "f0.csv",
                   "--at", 40, "--horizon", 6) == 2


class TestEvaluate:
    def test_report(self, work, tmp_path):
        root, ini = work
        assert run("--config", ini, "evaluate", "--checkpoint", root / "m.tabn", "--features", root / "f0.csv",
                   "--out-dir", tmp_path) == 0
        body = json.loads((tmp_path / "report.json").read_text())
        assert {"mae", "sd", "me", "aami_pass"} <= set(body["report"])
        assert body["version"] == __version__ and body["config"]["experiment"]["train_cycles"] == 120
        lines = (tmp_path / "series.csv").read_text().splitlines()
        assert lines[0] == "window_idx,step,truth_mmHg,pred_mmHg"
        assert len(lines) == 1 + 5 * body["report"]["n_windows"]

        series = CycleFeatureSeries.from_csv(root / "f0.csv")
        test = chronological_split(make_windows(series.head(120), 30, 5))[2]
        assert body["test_starts"] == test.starts.tolist()
        assert body["baselines"]["persistence"]["mae"] == baseline_persistence(test).mae_mmHg


@pytest.fixture(scope="module")
def ablation(work):
    root, ini = work
    assert run("--config", ini, "features", "--in", root / "rec" / "subject_01.csv", "--out", root / "f1.csv") == 0
    out = root / "grid"
    assert run("--config", ini, "ablate", "--out-dir", out, "--features", root / "f0.csv", root / "f1.csv",
               "--train-cycles", "60,120", "--horizons", "5,10", "--epochs", 1) == 0
    return out


class TestAblate:
    def test_shape(self, ablation):
        lines = (ablation / "grid.csv").read_text().splitlines()
        assert lines[0] == "model,train_cycles,h5_mae,h5_sd,h10_mae,h10_sd"
        assert [ln.split(",")[:2] for ln in lines[1:]] == [
            [m, tc] for m in ("tabnet", "persistence", "linear") for tc in ("60", "120")
        ]
        assert all(np.isfinite(float(v)) for ln in lines[1:] for v in ln.split(",")[2:])

    def test_baselines_match_standalone(self, work, ablation):
        root, _ = work
        body = json.loads((ablation / "grid.json").read_text())
        subjects = [CycleFeatureSeries.from_csv(root / f) for f in ("f0.csv", "f1.csv")]
        cells = {(c["model"], c["train_cycles"], c["horizon"]): c for c in body["grid"]["cells"]}
        for tc in (60, 120):
            for h in (5, 10):
                tests = [chronological_split(make_windows(s.head(tc), 30, h))[2] for s in subjects]
                for name, fn in (("persistence", baseline_persistence), ("linear", baseline_linear)):
                    want = np.mean([fn(t).mae_mmHg for t in tests])
                    assert abs(cells[(name, tc, h)]["mae"] - want) <= 1e-9

    def test_report_echoes_config(self, ablation):
        body = json.loads((ablation / "grid.json").read_text())
        assert body["version"] == __version__
        assert body["config"]["experiment"]["epochs"] == 1


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[model]\nd_modle = 16\n")
        assert run("--config", ini, "synth", "--out", tmp_path / "o") == 2
        assert not (tmp_path / "o").exists()

    def test_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[optimiser]\nlr = 0.1\n")
        assert run("--config", ini, "synth", "--out", tmp_path / "o") == 2

    def test_bad_value_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[experiment]\nepochs = ten\n")
        assert run("--config", ini, "synth", "--out", tmp_path / "o") == 2

    def test_env_var_honoured(self, tmp_path, monkeypatch):
        ini = tmp_path / "env.ini"
        ini.write_text("[synth]\nsubjects = 1\nn_beats = 20\nsample_rate_hz = 125\n")
        monkeypatch.setenv(ENV_VAR, str(ini))
        assert run("synth", "--out", tmp_path / "o") == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert len(manifest["subjects"]) == 1
        assert manifest["config"]["synth"]["sample_rate_hz"] == 125.0

    def test_defaults_round_trip_through_ini(self, tmp_path):
        cfg = RunConfig()
        (tmp_path / "d.ini").write_text(cfg.to_ini())
        assert RunConfig.from_file(tmp_path / "d.ini").to_dict() == cfg.to_dict()

    def test_global_flags_after_subcommand(self, tmp_path):
        ini = tmp_path / "s.ini"
        ini.write_text("[synth]\nsubjects = 1\nn_beats = 20\n")
        assert run("synth", "--config", ini, "--seed", 4, "--out", tmp_path / "o") == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["experiment"]["seed"] == 4
