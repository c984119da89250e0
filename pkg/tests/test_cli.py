import csv
import json
from pathlib import Path

import numpy as np
import pytest

from valvenet import synth
from valvenet.cli import main
from valvenet.core import load_sequence, read_manifest
from valvenet.train import TrainConfig


def run(*argv):
    return main([str(a) for a in argv])


class TestSynthCommand:
    def test_generates_dataset(self, tmp_path):
        out = tmp_path / "data"
        assert run("synth", "--out", out, "--subjects", 2, "--seed", 3, "--frames", 4) == 0
        manifest = read_manifest(out)
        assert len(manifest["sequences"]) == 6
        assert (out / "run_config.json").exists()

    def test_missing_out_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--subjects", 2)
        assert exc.value.code == 2

    def test_seed_determinism(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--out", tmp_path / name, "--subjects", 1, "--seed", 9,
                       "--frames", 4) == 0
        pa = sorted((tmp_path / "a").rglob("*.png"))
        pb = sorted((tmp_path / "b").rglob("*.png"))
        for x, y in zip(pa, pb):
            assert x.read_bytes() == y.read_bytes()


class TestTrainCommand:
    def _config(self, tmp_path, data_dir, **kw):
        cfg = dict(
            data_dir=str(data_dir), out_dir=str(tmp_path / "out"),
            iterations=2, epoch_length=2, batch_size=2, learning_rate=1e-3,
            seed=0, input_size=[32, 32], model_preset="tiny",
        )
        cfg.update(kw)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_train_runs(self, tmp_path, small_dataset):
        cfg = self._config(tmp_path, small_dataset)
        assert run("train", "--config", cfg) == 0
        assert (tmp_path / "out" / "checkpoint_final.npz").exists()
        assert (tmp_path / "out" / "train_config.json").exists()

    def test_invalid_lr_config_error(self, tmp_path, small_dataset):
        cfg = self._config(tmp_path, small_dataset, learning_rate=0.0)
        assert run("train", "--config", cfg) == 2

    def test_iterations_zero_writes_checkpoint(self, tmp_path, small_dataset):
        cfg = self._config(tmp_path, small_dataset)
        assert run("train", "--config", cfg, "--iterations", 0, "--out", tmp_path / "o0") == 0
        assert (tmp_path / "o0" / "checkpoint_final.npz").exists()

    def test_missing_config_file(self, tmp_path):
        assert run("train", "--config", tmp_path / "nope.json") == 2


class TestPredictCommand:
    def test_predict_dataset(self, tmp_path, small_dataset, tiny_run):
        _, ckpt = tiny_run
        out = tmp_path / "pred"
        assert run("predict", "--checkpoint", ckpt, "--data", small_dataset,
                   "--split", "val", "--out", out) == 0
        manifest = read_manifest(small_dataset)
        for rel in manifest["val"]:
            rec = load_sequence(out / rel, strict_view=False)
            assert rec.n_frames == 4
        assert (out / "run_config.json").exists()

    def test_predict_deterministic(self, tmp_path, small_dataset, tiny_run):
        _, ckpt = tiny_run
        manifest = read_manifest(small_dataset)
        rel = manifest["val"][0]
        outs = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            assert run("predict", "--checkpoint", ckpt, "--data", small_dataset / rel,
                       "--out", out) == 0
            outs.append(load_sequence(out / Path(rel).name, strict_view=False))
        a, b = outs
        for la, lb in zip(a.landmarks, b.landmarks):
            assert np.array_equal(la.points, lb.points)

    def test_wrong_size_without_resample(self, tmp_path, small_dataset, tiny_run):
        # tiny model expects 32x32; the dataset frames are 64x64
        _, ckpt = tiny_run
        manifest = read_manifest(small_dataset)
        rel = manifest["val"][0]
        code = run("predict", "--checkpoint", ckpt, "--data", small_dataset / rel,
                   "--out", tmp_path / "p", "--no-resample")
        assert code == 1


class TestEvalCommand:
    def test_perfect_oracle_zero_table(self, tmp_path, small_dataset, capsys):
        # compare the dataset against itself
        assert run("eval", "--pred", small_dataset, "--gt", small_dataset,
                   "--split", "val", "--out", tmp_path / "ev") == 0
        text = capsys.readouterr().out
        assert "0.000 ± 0.000" in text
        table = (tmp_path / "ev" / "error_table.csv").read_text()
        assert "prediction" in table

    def test_inter_observer_label(self, tmp_path, small_dataset, capsys):
        assert run("eval", "--pred", small_dataset, "--gt", small_dataset,
                   "--split", "val", "--label", "inter-observer") == 0
        assert "inter-observer" in capsys.readouterr().out

    def test_checkpoint_mode(self, tmp_path, small_dataset, tiny_run, capsys):
        _, ckpt = tiny_run
        assert run("eval", "--checkpoint", ckpt, "--data", small_dataset,
                   "--split", "val") == 0
        assert "network" in capsys.readouterr().out

    def test_needs_exactly_one_mode(self, small_dataset):
        assert run("eval", "--gt", small_dataset) == 2


class TestMetricsCommand:
    def test_csv_columns(self, tmp_path, small_dataset):
        out = tmp_path / "m.csv"
        assert run("metrics", "--data", small_dataset, "--split", "val", "--out", out) == 0
        with open(out) as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        assert header == ["subject", "view", "frame", "strain_mitral", "strain_aortic",
                          "strain_tricuspid", "mapse_mm", "tapse_mm"]
        assert rows
        ch4 = [r for r in rows if r[1] == "CH4"]
        assert ch4 and ch4[0][6] != ""

    def test_mapse_on_ch2_wrong_view(self, tmp_path, small_dataset):
        manifest = read_manifest(small_dataset)
        ch2 = [p for p in manifest["sequences"] if p["view"] == "CH2"][0]["path"]
        code = run("metrics", "--data", small_dataset / ch2, "--mapse",
                   "--out", tmp_path / "m.csv")
        assert code == 1

    def test_phantom_values_recovered(self, tmp_path):
        cfg = synth.PhantomConfig(subject_id="probe")
        rec = synth.generate_phantom_sequence(cfg, np.random.default_rng(0))
        from valvenet.core import save_sequence

        seq_path = tmp_path / "probe.json"
        save_sequence(rec, seq_path)
        out = tmp_path / "m.csv"
        assert run("metrics", "--data", seq_path, "--mapse", "--out", out) == 0
        with open(out) as f:
            rows = list(csv.DictReader(f))
        assert float(rows[0]["mapse_mm"]) == pytest.approx(12.0, abs=0.5)
        strains = [float(r["strain_mitral"]) for r in rows]
        assert min(strains) == pytest.approx(-0.15, abs=0.01)


class TestTrackCommand:
    def test_track_gt_init(self, tmp_path, small_dataset, capsys):
        manifest = read_manifest(small_dataset)
        rel = manifest["val"][0]
        out = tmp_path / "trk"
        assert run("track", "--data", small_dataset / rel, "--out", out) == 0
        assert (out / Path(rel).name).exists()
        assert (out / "error_table.csv").exists()
        assert "tracker" in capsys.readouterr().out

    def test_init_pred_needs_checkpoint(self, small_dataset, tmp_path):
        assert run("track", "--data", small_dataset, "--init", "pred",
                   "--out", tmp_path / "t") == 2


class TestEnvRoots:
    def test_data_root_resolution(self, tmp_path, small_dataset, monkeypatch):
        monkeypatch.setenv("VALVENET_DATA_ROOT", str(small_dataset.parent))
        monkeypatch.setenv("VALVENET_OUT_ROOT", str(tmp_path))
        assert run("metrics", "--data", small_dataset.name, "--split", "val",
                   "--out", "m.csv") == 0
        assert (tmp_path / "m.csv").exists()
