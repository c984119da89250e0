"""Error-adaptive minibatch selection.

After every epoch the per-landmark error on the validation set is recomputed
and each training image's sampling probability is set proportional to the
mean error of the landmark ids its view defines, so views with poorly
learned landmarks dominate later minibatches. A small probability floor
keeps well-learned images in circulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import N_LANDMARKS, ViewLabel, landmarks_for_view
from .errors import EmptyLandmarkCohort

EPOCH_LENGTH = 400
FLOOR_EPS = 1e-3


@dataclass
class CurriculumState:
    per_landmark_error: np.ndarray
    per_image_weight: np.ndarray
    epoch_length: int = EPOCH_LENGTH
    floor_eps: float = FLOOR_EPS

    def __post_init__(self):
        self.per_landmark_error = np.asarray(self.per_landmark_error, dtype=np.float64)
        self.per_image_weight = np.asarray(self.per_image_weight, dtype=np.float64)
        n = self.per_image_weight.size
        if not np.isclose(self.per_image_weight.sum(), 1.0):
            raise ValueError("per_image_weight must sum to 1")
        if np.any(self.per_image_weight < self.floor_eps / n * (1 - 1e-12)):
            raise ValueError("per_image_weight below the probability floor")

    @classmethod
    def initial(cls, n_images: int) -> "CurriculumState":
        return cls(
            per_landmark_error=np.zeros(N_LANDMARKS),
            per_image_weight=np.full(n_images, 1.0 / n_images),
        )


def per_landmark_validation_error(
    model,
    val_images: np.ndarray,
    val_targets: np.ndarray,
    val_present: np.ndarray,
    batch_size: int = 64,
) -> np.ndarray:
    """Mean Euclidean pixel error per landmark id over a validation set.

    ``val_images`` is (N, H, W), ``val_targets`` (N, 10, 2) with (0,0) for
    absent landmarks and ``val_present`` (N, 10) boolean. Landmark i's mean
    runs over the samples where it is present; an id that never appears
    raises ``EmptyLandmarkCohort``.
    """
    n = val_images.shape[0]
    if n == 0:
        raise EmptyLandmarkCohort("validation set is empty")
    missing = np.flatnonzero(~val_present.any(axis=0))
    if missing.size:
        raise EmptyLandmarkCohort(
            f"landmark ids {[int(i) + 1 for i in missing]} never present in validation set"
        )
    preds = np.empty((n, N_LANDMARKS, 2), dtype=np.float64)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            chunk = val_images[start : start + batch_size]
            x = torch.as_tensor(chunk, dtype=torch.float32).unsqueeze(1)
            preds[start : start + batch_size] = model(x).numpy()
    if was_training and hasattr(model, "train"):
        model.train()
    dists = np.linalg.norm(preds - val_targets, axis=2)
    errors = np.empty(N_LANDMARKS)
    for i in range(N_LANDMARKS):
        errors[i] = dists[val_present[:, i], i].mean()
    return errors


def update_sampling_weights(
    errors: np.ndarray,
    views: Sequence[ViewLabel],
    floor_eps: float = FLOOR_EPS,
) -> np.ndarray:
    """Per-image selection weights proportional to view-defined landmark error.

    Image score = mean of ``errors`` over the ids its view defines; scores
    below ``floor_eps * max_score`` are floored so nothing vanishes from the
    sampling pool. All-zero errors give uniform weights.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.shape != (N_LANDMARKS,) or np.any(errors < 0):
        raise ValueError("errors must be 10 nonnegative values")
    id_mask = {
        v: np.array([i - 1 for i in sorted(landmarks_for_view(v))]) for v in ViewLabel
    }
    scores = np.array([errors[id_mask[v]].mean() for v in views])
    max_score = scores.max() if scores.size else 0.0
    if max_score == 0.0:
        return np.full(len(views), 1.0 / len(views))
    floored = np.maximum(scores, floor_eps * max_score)
    return floored / floored.sum()


def sample_minibatch(
    weights: np.ndarray, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``batch_size`` image indices i.i.d. (with replacement)."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    return rng.choice(w.size, size=batch_size, replace=True, p=w)


def weight_entropy(weights: np.ndarray) -> float:
    """Shannon entropy (nats) of the sampling distribution, for logging."""
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())
