"""Pyramidal Lucas-Kanade point tracking, the classical comparison baseline.

Each present landmark is tracked independently frame to frame on a Gaussian
image pyramid, coarse to fine. Spatial gradients use central differences,
patches are sampled bilinearly, pyramids decimate 2x after Gaussian
smoothing. A point that leaves the trackable region or whose iteration fails
to settle is marked lost (absent) from that frame onward rather than frozen,
so downstream error tables stay honest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .core import Image2D, LandmarkSet, N_LANDMARKS
from .errors import InitOutOfBounds, PresenceMismatch
from .metrics import ErrorTable, paired_error_samples, summarize_errors

# iteration is allowed to stop above epsilon as long as the last update has
# settled below this; larger final updates count as divergence
SETTLE_PX = 0.5


@dataclass(frozen=True)
class TrackConfig:
    window: int = 15
    pyramid_levels: int = 3
    max_iters: int = 30
    epsilon: float = 0.01

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be at least 1")
        if self.max_iters < 1 or self.epsilon <= 0:
            raise ValueError("max_iters must be >= 1 and epsilon > 0")

    @property
    def margin(self) -> int:
        return self.window // 2 + 1


def _as_pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Image2D) else np.asarray(frame, dtype=np.float64)


def _build_pyramid(pixels: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(pixels, dtype=np.float64)]
    for _ in range(levels - 1):
        smoothed = gaussian_filter(pyr[-1], sigma=1.0, mode="nearest")
        pyr.append(smoothed[::2, ::2])
    return pyr


def _usable_levels(shape: tuple[int, int], cfg: TrackConfig) -> int:
    levels = 1
    min_dim = min(shape)
    while levels < cfg.pyramid_levels and min_dim // (2 ** levels) >= cfg.window + 4:
        levels += 1
    return levels


def _sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return map_coordinates(img, [ys, xs], order=1, mode="nearest")


def _in_bounds(x: float, y: float, shape: tuple[int, int], margin: float) -> bool:
    h, w = shape
    return margin <= x <= w - 1 - margin and margin <= y <= h - 1 - margin


def _track_point(
    pyr_prev: list[np.ndarray],
    pyr_next: list[np.ndarray],
    p: np.ndarray,
    cfg: TrackConfig,
) -> Optional[np.ndarray]:
    """Displace one point from the previous to the next frame; None if lost."""
    hw = cfg.window // 2
    rng_off = np.arange(-hw, hw + 1, dtype=np.float64)
    off_y, off_x = np.meshgrid(rng_off, rng_off, indexing="ij")
    off_x, off_y = off_x.ravel(), off_y.ravel()

    g = np.zeros(2)
    for level in reversed(range(len(pyr_prev))):
        prev_img, next_img = pyr_prev[level], pyr_next[level]
        pl = p / (2.0 ** level)
        if not _in_bounds(pl[0], pl[1], prev_img.shape, hw + 1):
            if level == 0:
                return None
            g *= 2.0
            continue
        xs, ys = pl[0] + off_x, pl[1] + off_y
        patch = _sample(prev_img, xs, ys)
        grad_x = (_sample(prev_img, xs + 1, ys) - _sample(prev_img, xs - 1, ys)) / 2.0
        grad_y = (_sample(prev_img, xs, ys + 1) - _sample(prev_img, xs, ys - 1)) / 2.0
        gram = np.array(
            [
                [np.dot(grad_x, grad_x), np.dot(grad_x, grad_y)],
                [np.dot(grad_x, grad_y), np.dot(grad_y, grad_y)],
            ]
        )
        if np.linalg.det(gram) < 1e-12:
            return None

        v = np.zeros(2)
        delta = np.full(2, np.inf)
        for _ in range(cfg.max_iters):
            cx, cy = pl[0] + g[0] + v[0], pl[1] + g[1] + v[1]
            if not _in_bounds(cx, cy, next_img.shape, 0.0):
                return None
            moved = _sample(next_img, cx + off_x, cy + off_y)
            residual = patch - moved
            rhs = np.array([np.dot(residual, grad_x), np.dot(residual, grad_y)])
            delta = np.linalg.solve(gram, rhs)
            v += delta
            if np.hypot(*delta) < cfg.epsilon:
                break
        if np.hypot(*delta) >= SETTLE_PX:
            return None  # failed to settle at this level
        if np.hypot(*(g + v)) > cfg.window * (2 ** (len(pyr_prev) - level)):
            return None  # runaway update
        g = 2.0 * (g + v) if level > 0 else g + v

    p_new = p + g
    if not _in_bounds(p_new[0], p_new[1], pyr_next[0].shape, cfg.margin):
        return None
    return p_new


def lk_track(
    frames: Sequence[Image2D] | Sequence[np.ndarray],
    init: LandmarkSet,
    cfg: TrackConfig = TrackConfig(),
) -> list[LandmarkSet]:
    """Track every present landmark of ``init`` through the sequence.

    Output frame 0 equals ``init``; once a point is lost it stays absent.
    """
    if len(frames) < 2:
        raise ValueError("tracking needs at least two frames")
    pixels = [_as_pixels(f) for f in frames]
    shape = pixels[0].shape
    for lid in sorted(init.present_ids()):
        x, y = init.get(lid)
        if not _in_bounds(x, y, shape, cfg.margin):
            raise InitOutOfBounds(
                f"landmark {lid} at ({x:.1f}, {y:.1f}) is within {cfg.margin} px "
                f"of the border (window {cfg.window})"
            )

    levels = _usable_levels(shape, cfg)
    outputs = [init]
    positions = init.points.copy()
    active = init.present.copy()

    pyr_prev = _build_pyramid(pixels[0], levels)
    for t in range(1, len(pixels)):
        pyr_next = _build_pyramid(pixels[t], levels)
        pts = np.zeros((N_LANDMARKS, 2))
        for i in np.flatnonzero(active):
            moved = _track_point(pyr_prev, pyr_next, positions[i], cfg)
            if moved is None:
                active[i] = False
            else:
                positions[i] = moved
                pts[i] = moved
        outputs.append(LandmarkSet(pts, active.copy()))
        pyr_prev = pyr_next
    return outputs


def tracking_error_table(
    tracked: Sequence[LandmarkSet],
    gt: Sequence[LandmarkSet],
    label: str = "tracker",
) -> ErrorTable:
    """Pixel-error table against ground truth; lost points excluded and counted."""
    samples, missing, spurious = paired_error_samples(tracked, gt)
    if spurious:
        raise PresenceMismatch(
            f"tracker reports points the ground truth does not have: {spurious}"
        )
    table = summarize_errors(samples, label=label)
    table.excluded = missing
    return table
