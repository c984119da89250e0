"""Per-frame landmark inference on stored sequences.

Frames are preprocessed to the network's input size, the forward pass runs
per frame with no temporal coupling, and outputs map back to the original
pixel grid. A predicted coordinate whose norm (at network resolution) falls
below the presence threshold is read as the (0,0) sentinel and marked
absent; so are predictions that land outside the image.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np
import torch

from .core import (
    Image2D,
    LandmarkSet,
    SequenceRecord,
    normalize_intensity,
    resample_image,
)
from .errors import ShapeError
from .model import RegressorModel

PRESENCE_THRESHOLD_PX = 5.0


def predict_landmarks(
    model: RegressorModel,
    frames: Sequence[Image2D],
    presence_threshold: float = PRESENCE_THRESHOLD_PX,
    resample: bool = True,
    batch_size: int = 64,
) -> list[LandmarkSet]:
    """Predict one LandmarkSet per frame, in the frames' own pixel coords."""
    h_net, w_net = model.spec.input_size
    h, w = frames[0].shape
    if not resample and (h, w) != (h_net, w_net):
        raise ShapeError(
            f"frames are {w}x{h} but the network expects {w_net}x{h_net} "
            f"(rerun with resampling enabled)"
        )
    arrays = []
    for frame in frames:
        img = normalize_intensity(resample_image(frame, (h_net, w_net)))
        arrays.append(img.pixels.astype(np.float32))
    stack = np.stack(arrays)

    model.eval()
    preds = np.empty((len(frames), 10, 2), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(frames), batch_size):
            x = torch.from_numpy(stack[start : start + batch_size]).unsqueeze(1)
            preds[start : start + batch_size] = model(x).numpy()

    sx, sy = w / w_net, h / h_net
    out = []
    for row in preds:
        present = np.linalg.norm(row, axis=1) >= presence_threshold
        pts = row.copy()
        pts[:, 0] = (pts[:, 0] + 0.5) * sx - 0.5
        pts[:, 1] = (pts[:, 1] + 0.5) * sy - 0.5
        inside = (pts[:, 0] > 0) & (pts[:, 0] < w) & (pts[:, 1] > 0) & (pts[:, 1] < h)
        keep = present & inside
        pts[~keep] = 0.0
        out.append(LandmarkSet(pts, keep))
    return out


def predict_record(
    model: RegressorModel,
    record: SequenceRecord,
    presence_threshold: float = PRESENCE_THRESHOLD_PX,
    resample: bool = True,
) -> SequenceRecord:
    """Copy of ``record`` with its annotations replaced by predictions."""
    predicted = predict_landmarks(
        model, record.frames, presence_threshold=presence_threshold, resample=resample
    )
    return replace(record, landmarks=predicted, strict_view=False)
