import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from valvenet import synth
from valvenet.augment import AugmentConfig
from valvenet.core import ViewLabel, load_split
from valvenet.curriculum import update_sampling_weights, per_landmark_validation_error
from valvenet.errors import (
    ConfigError,
    CorruptCheckpoint,
    MissingFile,
    NonFiniteLoss,
    ShapeError,
    VersionMismatch,
)
from valvenet.model import RegressorSpec, build_model
from valvenet.train import (
    ADAM_BETAS,
    ADAM_EPS,
    TrainConfig,
    flatten_records,
    load_checkpoint,
    mae_loss,
    save_checkpoint,
    train,
    train_step,
)


class TestMaeLoss:
    def test_zero_when_equal(self):
        x = torch.rand(2, 10, 2)
        assert mae_loss(x, x).item() == 0.0

    def test_half_when_x_off_by_one(self):
        target = torch.rand(3, 10, 2)
        pred = target.clone()
        pred[..., 0] += 1.0
        assert mae_loss(pred, target).item() == pytest.approx(0.5)

    def test_single_landmark_example(self):
        target = torch.rand(1, 10, 2)
        pred = target.clone()
        pred[0, 4, 0] += 3.0
        pred[0, 4, 1] -= 4.0
        assert mae_loss(pred, target).item() == pytest.approx(0.35)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            mae_loss(torch.rand(1, 10, 2), torch.rand(2, 10, 2))


class TestTrainStep:
    def _setup(self, lr):
        torch.manual_seed(0)
        model = build_model(RegressorSpec.tiny(), 2)
        opt = torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        x = torch.rand(2, 1, 32, 32)
        y = torch.rand(2, 10, 2) * 20
        return model, opt, x, y

    def test_zero_lr_keeps_params(self):
        model, opt, x, y = self._setup(0.0)
        before = [p.detach().clone() for p in model.parameters()]
        loss = train_step(model, opt, x, y)
        assert loss > 0
        for b, p in zip(before, model.parameters()):
            assert torch.equal(b, p)

    def test_loss_decreases_on_fixed_sample(self):
        model, opt, x, y = self._setup(1e-3)
        losses = [train_step(model, opt, x, y) for _ in range(51)]
        decreases = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
        assert decreases >= 45

    def test_nan_parameter_aborts(self):
        model, opt, x, y = self._setup(1e-3)
        with torch.no_grad():
            p = next(model.parameters())
            p.view(-1)[0] = float("nan")
        with pytest.raises(NonFiniteLoss):
            train_step(model, opt, x, y)


class TestConfig:
    def _minimal(self, **kw):
        d = {"data_dir": "d", "out_dir": "o"}
        d.update(kw)
        return TrainConfig.from_json(json.dumps(d))

    def test_round_trip(self):
        cfg = TrainConfig(data_dir="d", out_dir="o", iterations=7)
        back = TrainConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            self._minimal(bogus=1)

    def test_zero_lr_rejected(self):
        with pytest.raises(ConfigError):
            self._minimal(learning_rate=0.0)

    def test_bad_input_size(self):
        with pytest.raises(ConfigError):
            self._minimal(input_size=[60, 64])

    def test_augment_nested(self):
        cfg = self._minimal(augment=AugmentConfig(rot_max_deg=5.0).to_dict())
        assert cfg.augment.rot_max_deg == 5.0


class TestCheckpoint:
    def test_round_trip_forward_equal(self, tmp_path):
        model = build_model(RegressorSpec.tiny(), 3)
        path = save_checkpoint(tmp_path / "c.npz", model, iteration=17, seed=9)
        loaded, cfg, it = load_checkpoint(path)
        assert it == 17 and cfg is None
        model.eval(), loaded.eval()
        for seed in range(5):
            x = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(seed))
            with torch.no_grad():
                assert torch.equal(model(x), loaded(x))

    def test_config_embedded(self, tmp_path):
        model = build_model(RegressorSpec.tiny(), 3)
        cfg = TrainConfig(data_dir="d", out_dir="o", input_size=(32, 32), model_preset="tiny")
        path = save_checkpoint(tmp_path / "c.npz", model, 5, 1, config=cfg)
        _, back, _ = load_checkpoint(path)
        assert back == cfg

    def test_truncated_file(self, tmp_path):
        model = build_model(RegressorSpec.tiny(), 3)
        path = save_checkpoint(tmp_path / "c.npz", model, 0, 0)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 3])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        model = build_model(RegressorSpec.tiny(), 3)
        path = tmp_path / "c.npz"
        from valvenet.train import _flatten_params

        with open(path, "wb") as f:
            np.savez(
                f,
                version=np.int64(99),
                spec_json=model.spec.to_json(),
                config_json="",
                iteration=np.int64(0),
                seed=np.int64(0),
                params=_flatten_params(model),
            )
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "nope.npz")


class TestTrainLoop:
    def test_zero_iterations_writes_untrained_checkpoint(self, tmp_path, small_dataset):
        cfg = TrainConfig(
            data_dir=str(small_dataset),
            out_dir=str(tmp_path / "run0"),
            iterations=0,
            input_size=(32, 32),
            model_preset="tiny",
        )
        ckpt = train(cfg)
        model, back_cfg, it = load_checkpoint(ckpt)
        assert it == 0
        assert back_cfg.iterations == 0
        epoch_log = (tmp_path / "run0" / "epoch_log.csv").read_text()
        assert epoch_log.strip() == "epoch,landmark_id,error_px"  # header only

    def test_logs_and_checkpoints(self, tiny_run):
        out, ckpt = tiny_run
        train_log = (out / "train_log.csv").read_text().strip().splitlines()
        assert train_log[0] == "iteration,loss"
        assert len(train_log) == 5  # header + 4 iterations
        epoch_rows = (out / "epoch_log.csv").read_text().strip().splitlines()
        assert len(epoch_rows) == 1 + 2 * 10  # 2 epochs x 10 landmarks
        assert (out / "train_config.json").exists()
        _, cfg, it = load_checkpoint(ckpt)
        assert it == 4

    def test_reproducible_logs(self, tmp_path, small_dataset):
        logs = []
        for run in ("a", "b"):
            cfg = TrainConfig(
                data_dir=str(small_dataset),
                out_dir=str(tmp_path / run),
                iterations=4,
                epoch_length=2,
                batch_size=4,
                learning_rate=1e-3,
                seed=21,
                input_size=(32, 32),
                model_preset="tiny",
            )
            train(cfg)
            logs.append(
                (
                    (tmp_path / run / "train_log.csv").read_text(),
                    (tmp_path / run / "epoch_log.csv").read_text(),
                )
            )
        assert logs[0] == logs[1]

    def test_curriculum_reacts_to_hard_landmark(self, tmp_path):
        """Noisy annotations on landmark 1 keep CH2 weights elevated."""
        data = tmp_path / "noisy"
        base = synth.PhantomConfig(frames_per_cycle=4)
        synth.generate_dataset(data, n_subjects=4, seed=3, base=base, val_fraction=0.5)
        rng = np.random.default_rng(0)
        for split_file in sorted((data / "seqs").glob("*CH2.json")):
            doc = json.loads(split_file.read_text())
            for frame_lms in doc["landmarks"]:
                frame_lms["points"][0][0] += float(rng.uniform(10, 16) * rng.choice([-1, 1]))
                frame_lms["points"][0][1] += float(rng.uniform(10, 16) * rng.choice([-1, 1]))
            split_file.write_text(json.dumps(doc))

        cfg = TrainConfig(
            data_dir=str(data),
            out_dir=str(tmp_path / "run"),
            iterations=800,
            epoch_length=200,
            batch_size=8,
            learning_rate=1e-3,
            seed=2,
            input_size=(32, 32),
            model_preset="tiny",
            augment=AugmentConfig.disabled(),
        )
        ckpt = train(cfg)
        model, _, _ = load_checkpoint(ckpt)
        val = flatten_records(load_split(data, "val"), (32, 32))
        errors = per_landmark_validation_error(model, val.images, val.targets, val.present)
        train_views = flatten_records(load_split(data, "train"), (32, 32)).views
        weights = update_sampling_weights(errors, train_views)
        w = np.asarray(weights)
        views = np.array([v.value for v in train_views])
        ch2_mean = w[views == "CH2"].mean()
        other_mean = w[views != "CH2"].mean()
        assert ch2_mean > other_mean
