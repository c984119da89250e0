"""Supervised training loop: MAE loss, Adam, curriculum minibatches.

Targets are the ten landmark coordinate pairs at network input resolution;
absent landmarks contribute their literal (0,0) sentinel to the loss rather
than being masked, which is what teaches the heads to emit the sentinel.
Every epoch (400 iterations by default) the per-landmark validation error is
recomputed and the sampling weights updated. Reproducible mode forces
single-threaded execution so identical seeds give bit-identical logs.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import curriculum
from .augment import AugmentConfig, augment_sample
from .core import (
    Image2D,
    LandmarkSet,
    SequenceRecord,
    ViewLabel,
    load_split,
    preprocess_sample,
)
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    MissingFile,
    NonFiniteLoss,
    ShapeError,
    VersionMismatch,
)
from .model import RegressorModel, RegressorSpec, build_model

CHECKPOINT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

MODEL_PRESETS = {
    "desk": RegressorSpec.desk,
    "full": RegressorSpec.full,
    "tiny": RegressorSpec.tiny,
}


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    iterations: int = 2000
    epoch_length: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    input_size: tuple[int, int] = (64, 64)
    checkpoint_every: int = 1000
    model_preset: str = "desk"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    reproducible: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.input_size = tuple(self.input_size)
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epoch_length < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, epoch_length and checkpoint_every must be >= 1")
        if self.model_preset not in MODEL_PRESETS:
            raise ConfigError(f"model_preset must be one of {sorted(MODEL_PRESETS)}")
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError("input_size must be >= 32 and divisible by 32")

    def to_json(self) -> str:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = d.keys() - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"data_dir", "out_dir"} - d.keys()
        if missing:
            raise ConfigError(f"config must set {sorted(missing)}")
        return cls(**d)

    def model_spec(self) -> RegressorSpec:
        return MODEL_PRESETS[self.model_preset](self.input_size)


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over every coordinate component of the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def train_step(
    model: RegressorModel,
    optimizer: torch.optim.Optimizer,
    batch_images: torch.Tensor,
    batch_targets: torch.Tensor,
) -> float:
    """One forward/backward/Adam update; returns the pre-update loss."""
    model.train()
    pred = model(batch_images)
    loss = mae_loss(pred, batch_targets)
    if not torch.isfinite(loss):
        bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
        raise NonFiniteLoss(
            f"loss is {loss.item()}; non-finite parameters: {bad or 'none'}; "
            f"input range [{batch_images.min():.3g}, {batch_images.max():.3g}]"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# --- in-memory flattened dataset ---------------------------------------------

@dataclass
class FlatSamples:
    """Per-frame training samples at network input resolution."""

    images: np.ndarray   # (N, H, W) float32 in [0, 1]
    targets: np.ndarray  # (N, 10, 2) float32, (0,0) for absent
    present: np.ndarray  # (N, 10) bool
    views: list[ViewLabel]

    def __len__(self) -> int:
        return self.images.shape[0]


def flatten_records(
    records: Sequence[SequenceRecord], input_size: tuple[int, int]
) -> FlatSamples:
    images, targets, present, views = [], [], [], []
    for rec in records:
        for frame, lms in zip(rec.frames, rec.landmarks):
            img, scaled = preprocess_sample(frame, lms, input_size)
            images.append(img.pixels.astype(np.float32))
            targets.append(scaled.points.astype(np.float32))
            present.append(scaled.present)
            views.append(rec.view)
    return FlatSamples(
        images=np.stack(images),
        targets=np.stack(targets),
        present=np.stack(present),
        views=views,
    )


def assemble_batch(
    samples: FlatSamples,
    indices: np.ndarray,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for i in indices:
        img = Image2D(samples.images[i])
        lms = LandmarkSet(samples.targets[i], samples.present[i])
        img, lms = augment_sample(img, lms, aug_cfg, rng)
        xs.append(img.pixels.astype(np.float32))
        ys.append(lms.points.astype(np.float32))
    x = torch.from_numpy(np.stack(xs)).unsqueeze(1)
    y = torch.from_numpy(np.stack(ys))
    return x, y


# --- checkpoints --------------------------------------------------------------

def _flatten_params(model: torch.nn.Module) -> np.ndarray:
    with torch.no_grad():
        return torch.cat([p.reshape(-1) for p in model.state_dict().values()]).numpy().copy()


def save_checkpoint(
    path: str | Path,
    model: RegressorModel,
    iteration: int,
    seed: int,
    config: Optional[TrainConfig] = None,
) -> Path:
    """Versioned container: spec JSON + flat parameter blob + metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(
            f,
            version=np.int64(CHECKPOINT_VERSION),
            spec_json=model.spec.to_json(),
            config_json=config.to_json() if config is not None else "",
            iteration=np.int64(iteration),
            seed=np.int64(seed),
            params=_flatten_params(model),
        )
    return path


def load_checkpoint(path: str | Path) -> tuple[RegressorModel, Optional[TrainConfig], int]:
    """Rebuild the model so reloaded forward passes match the saved ones exactly."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise VersionMismatch(
                    f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
                )
            spec_json = str(data["spec_json"])
            config_json = str(data["config_json"])
            iteration = int(data["iteration"])
            flat = np.asarray(data["params"], dtype=np.float32)
    except VersionMismatch:
        raise
    except (zipfile.BadZipFile, ValueError, KeyError, EOFError, OSError, io.UnsupportedOperation) as e:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {e}") from e

    spec = RegressorSpec.from_json(spec_json)
    model = RegressorModel(spec)
    state = model.state_dict()
    total = sum(int(np.prod(t.shape)) for t in state.values())
    if flat.size != total:
        raise CorruptCheckpoint(
            f"parameter blob holds {flat.size} values, spec needs {total}"
        )
    offset = 0
    with torch.no_grad():
        for tensor in state.values():
            n = int(np.prod(tensor.shape))
            chunk = torch.from_numpy(flat[offset : offset + n].copy()).view(tensor.shape)
            tensor.copy_(chunk)
            offset += n
    model.load_state_dict(state)
    config = TrainConfig.from_json(config_json) if config_json else None
    return model, config, iteration


# --- the loop -----------------------------------------------------------------

def train(config: TrainConfig) -> Path:
    """Run the full training recipe; returns the final checkpoint path."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "train_config.json").write_text(config.to_json() + "\n")

    if config.reproducible:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    master = np.random.default_rng(config.seed)
    rng_model = np.random.default_rng(master.integers(2**63))
    rng_sample = np.random.default_rng(master.integers(2**63))
    rng_augment = np.random.default_rng(master.integers(2**63))

    train_records = load_split(config.data_dir, "train")
    val_records = load_split(config.data_dir, "val")
    train_set = flatten_records(train_records, config.input_size)
    val_set = flatten_records(val_records, config.input_size)

    model = build_model(config.model_spec(), rng_model)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    weights = np.full(len(train_set), 1.0 / len(train_set))

    train_log = open(out_dir / "train_log.csv", "w")
    epoch_log = open(out_dir / "epoch_log.csv", "w")
    summary_log = open(out_dir / "epoch_summary.csv", "w")
    train_log.write("iteration,loss\n")
    epoch_log.write("epoch,landmark_id,error_px\n")
    summary_log.write("epoch,mean_error_px,weight_entropy\n")

    try:
        for it in range(1, config.iterations + 1):
            idx = curriculum.sample_minibatch(weights, config.batch_size, rng_sample)
            x, y = assemble_batch(train_set, idx, config.augment, rng_augment)
            loss = train_step(model, optimizer, x, y)
            train_log.write(f"{it},{loss!r}\n")

            if it % config.epoch_length == 0:
                epoch = it // config.epoch_length
                errors = curriculum.per_landmark_validation_error(
                    model, val_set.images, val_set.targets, val_set.present
                )
                weights = curriculum.update_sampling_weights(errors, train_set.views)
                for lid in range(1, 11):
                    epoch_log.write(f"{epoch},{lid},{errors[lid - 1]!r}\n")
                summary_log.write(
                    f"{epoch},{errors.mean()!r},{curriculum.weight_entropy(weights)!r}\n"
                )

            if it % config.checkpoint_every == 0 and it != config.iterations:
                save_checkpoint(
                    out_dir / f"checkpoint_{it:06d}.npz", model, it, config.seed, config
                )
    finally:
        train_log.close()
        epoch_log.close()
        summary_log.close()

    final = save_checkpoint(
        out_dir / "checkpoint_final.npz", model, config.iterations, config.seed, config
    )
    return final
