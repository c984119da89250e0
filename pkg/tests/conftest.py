import numpy as np
import pytest
import torch

from valvenet import synth
from valvenet.augment import AugmentConfig
from valvenet.train import TrainConfig, train

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """2 subjects x 3 views x 4 frames at 64x64, enough for plumbing tests."""
    out = tmp_path_factory.mktemp("data") / "small"
    base = synth.PhantomConfig(frames_per_cycle=4)
    synth.generate_dataset(out, n_subjects=2, seed=123, base=base, val_fraction=0.5)
    return out


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, small_dataset):
    """A few training iterations of the tiny model; returns (out_dir, checkpoint)."""
    out = tmp_path_factory.mktemp("run") / "tiny"
    cfg = TrainConfig(
        data_dir=str(small_dataset),
        out_dir=str(out),
        iterations=4,
        epoch_length=2,
        batch_size=4,
        learning_rate=1e-3,
        seed=5,
        input_size=(32, 32),
        checkpoint_every=100,
        model_preset="tiny",
        augment=AugmentConfig.disabled(),
    )
    ckpt = train(cfg)
    return out, ckpt
