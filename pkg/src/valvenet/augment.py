"""Stochastic image + landmark augmentation used during minibatch assembly.

Every operation is a pure function of its inputs and an explicit numpy
``Generator``, so workers with independent streams can run concurrently.
Geometric operations move present landmarks with the exact coordinate map of
the image transform; a landmark pushed outside the image becomes absent
(its coordinates collapse to the (0,0) sentinel), matching the network's
output contract for landmarks that are not in view.

Order of composition in ``augment_sample``: flips / transpose / rotation /
shift first (landmark math stays exact before intensity corruption), then
free-form deformation, k-space dropout, smooth intensity shift and pixel
noise.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates

from .core import Image2D, LandmarkSet
from .errors import InvariantViolation

_KINDS = ("flip_h", "flip_v", "transpose", "rotate", "shift")


@dataclass(frozen=True)
class AugmentConfig:
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    p_transpose: float = 0.5
    rot_max_deg: float = 30.0
    shift_max_frac: float = 0.1
    noise_sigma: float = 0.05
    kspace_drop_rate: float = 0.05
    kspace_mode: str = "iid"  # "iid" or "lines" (whole phase-encode rows)
    intensity_shift_amp: float = 0.1
    ffd_grid: int = 4
    ffd_max_disp_px: float = 4.0
    enable_flips: bool = True
    enable_transpose: bool = True
    enable_rotate: bool = True
    enable_shift: bool = True
    enable_ffd: bool = True
    enable_kspace: bool = True
    enable_intensity: bool = True
    enable_noise: bool = True

    def __post_init__(self):
        for name in ("p_flip_h", "p_flip_v", "p_transpose", "kspace_drop_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"{name} must be a probability, got {v}")
        if not 0.0 <= self.rot_max_deg <= 180.0:
            raise InvariantViolation(f"rot_max_deg must be in [0, 180], got {self.rot_max_deg}")
        for name in ("shift_max_frac", "noise_sigma", "intensity_shift_amp", "ffd_max_disp_px"):
            if getattr(self, name) < 0:
                raise InvariantViolation(f"{name} must be nonnegative")
        if self.ffd_grid < 2:
            raise InvariantViolation(f"ffd_grid must be at least 2, got {self.ffd_grid}")
        if self.kspace_mode not in ("iid", "lines"):
            raise InvariantViolation(f"kspace_mode must be 'iid' or 'lines', got {self.kspace_mode}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        """Configuration under which augment_sample is the identity."""
        return cls(
            p_flip_h=0.0, p_flip_v=0.0, p_transpose=0.0, rot_max_deg=0.0,
            shift_max_frac=0.0, noise_sigma=0.0, kspace_drop_rate=0.0,
            intensity_shift_amp=0.0, ffd_max_disp_px=0.0,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = d.keys() - known
        if unknown:
            raise InvariantViolation(f"unknown augment config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GeomTransform:
    """One flip/transpose/rotation/shift, invertible on continuous coords."""

    kind: str
    angle_deg: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvariantViolation(f"unknown transform kind {self.kind!r}")

    @classmethod
    def flip_h(cls) -> "GeomTransform":
        return cls("flip_h")

    @classmethod
    def flip_v(cls) -> "GeomTransform":
        return cls("flip_v")

    @classmethod
    def transpose(cls) -> "GeomTransform":
        return cls("transpose")

    @classmethod
    def rotate(cls, angle_deg: float) -> "GeomTransform":
        return cls("rotate", angle_deg=angle_deg)

    @classmethod
    def shift(cls, dx: float, dy: float) -> "GeomTransform":
        return cls("shift", dx=dx, dy=dy)

    def map_points(self, pts: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        """Forward coordinate map for (N, 2) arrays of (x, y) pixel coords."""
        h, w = shape
        pts = np.asarray(pts, dtype=np.float64)
        out = pts.copy()
        if self.kind == "flip_h":
            out[:, 0] = (w - 1) - pts[:, 0]
        elif self.kind == "flip_v":
            out[:, 1] = (h - 1) - pts[:, 1]
        elif self.kind == "transpose":
            out = pts[:, ::-1].copy()
        elif self.kind == "rotate":
            t = np.deg2rad(self.angle_deg)
            c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
            rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
            out = (pts - c) @ rot.T + c
        elif self.kind == "shift":
            out[:, 0] = pts[:, 0] + self.dx
            out[:, 1] = pts[:, 1] + self.dy
        return out

    def output_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        h, w = shape
        return (w, h) if self.kind == "transpose" else (h, w)


def _warp_image(pixels: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    """Bilinear backward warp; out-of-bounds samples fill with 0."""
    return map_coordinates(pixels, [src_y, src_x], order=1, mode="constant", cval=0.0)


def _drop_ejected(pts: np.ndarray, present: np.ndarray, shape: tuple[int, int]) -> LandmarkSet:
    h, w = shape
    inside = (pts[:, 0] > 0) & (pts[:, 0] < w) & (pts[:, 1] > 0) & (pts[:, 1] < h)
    keep = present & inside
    out = pts.copy()
    out[~keep] = 0.0
    return LandmarkSet(out, keep)


def apply_geometric(
    img: Image2D, lms: LandmarkSet, t: GeomTransform
) -> tuple[Image2D, LandmarkSet]:
    """Apply one geometric transform to an image and its landmarks.

    Flips and transposes are exact array operations; rotations and
    fractional shifts resample bilinearly with zero fill.
    """
    h, w = img.shape
    pix = img.pixels
    spacing = img.spacing
    if t.kind == "flip_h":
        out_pix = pix[:, ::-1]
    elif t.kind == "flip_v":
        out_pix = pix[::-1, :]
    elif t.kind == "transpose":
        out_pix = pix.T
        spacing = (spacing[1], spacing[0])
    elif t.kind == "rotate":
        th = np.deg2rad(t.angle_deg)
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        # backward map: rotate output coords by -theta about the centre
        ct, st = np.cos(th), np.sin(th)
        src_x = ct * (xx - cx) + st * (yy - cy) + cx
        src_y = -st * (xx - cx) + ct * (yy - cy) + cy
        out_pix = _warp_image(pix, src_x, src_y)
    elif t.kind == "shift":
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        out_pix = _warp_image(pix, xx - t.dx, yy - t.dy)
    else:  # pragma: no cover - guarded by GeomTransform
        raise InvariantViolation(f"unknown transform kind {t.kind!r}")

    out_img = Image2D(out_pix, spacing)
    mapped = t.map_points(lms.points, img.shape)
    out_lms = _drop_ejected(mapped, lms.present, t.output_shape(img.shape))
    return out_img, out_lms


def kspace_dropout(
    img: Image2D, rate: float, rng: np.random.Generator, mode: str = "iid"
) -> Image2D:
    """Zero 2D Fourier coefficients at random, keeping the DC bin.

    ``mode="iid"`` drops coefficients independently; ``mode="lines"`` drops
    whole rows, mimicking phase-encode line corruption. The output is the
    real part of the inverse transform.
    """
    if not 0.0 <= rate <= 1.0:
        raise InvariantViolation(f"rate must be in [0, 1], got {rate}")
    pix = img.pixels
    if np.ptp(pix) == 0.0:
        # all spectral energy sits in the preserved DC bin
        return Image2D(pix, img.spacing)
    spectrum = np.fft.fft2(pix)
    if mode == "iid":
        keep = rng.random(spectrum.shape) >= rate
    elif mode == "lines":
        keep_rows = rng.random(spectrum.shape[0]) >= rate
        keep = np.repeat(keep_rows[:, None], spectrum.shape[1], axis=1)
    else:
        raise InvariantViolation(f"mode must be 'iid' or 'lines', got {mode}")
    keep[0, 0] = True
    out = np.fft.ifft2(spectrum * keep).real
    return Image2D(out, img.spacing)


def intensity_shift(img: Image2D, amp: float, rng: np.random.Generator) -> Image2D:
    """Add a smooth low-frequency field (bilinear 4x4 grid) and clamp to [0,1]."""
    if amp < 0:
        raise InvariantViolation(f"amp must be nonnegative, got {amp}")
    if amp == 0.0:
        return img
    h, w = img.shape
    grid = rng.uniform(-amp, amp, size=(4, 4))
    gy = np.linspace(0.0, 3.0, h)
    gx = np.linspace(0.0, 3.0, w)
    coords = np.meshgrid(gy, gx, indexing="ij")
    shift_field = map_coordinates(grid, coords, order=1, mode="nearest")
    return Image2D(np.clip(img.pixels + shift_field, 0.0, 1.0), img.spacing)


def add_noise(img: Image2D, sigma: float, rng: np.random.Generator) -> Image2D:
    """Per-pixel gaussian noise, clamped to [0, 1]."""
    if sigma < 0:
        raise InvariantViolation(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return img
    noisy = img.pixels + rng.normal(0.0, sigma, size=img.shape)
    return Image2D(np.clip(noisy, 0.0, 1.0), img.spacing)


# --- free-form deformation ---------------------------------------------------

def _bspline_weights(u: np.ndarray) -> list[np.ndarray]:
    """Uniform cubic B-spline basis values for fractional offsets in [0, 1)."""
    u2, u3 = u * u, u * u * u
    return [
        (1 - u) ** 3 / 6.0,
        (3 * u3 - 6 * u2 + 4) / 6.0,
        (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0,
        u3 / 6.0,
    ]


def _ffd_field(
    ctrl: np.ndarray, x: np.ndarray, y: np.ndarray, shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the lattice displacement at (x, y) pixel positions.

    ``ctrl`` is (grid, grid, 2) with control displacements (dx, dy); the
    lattice spans the image with corner alignment and zero padding outside,
    so displacements are convex mixtures of control values (norm bounded by
    the largest control displacement).
    """
    h, w = shape
    grid = ctrl.shape[0]
    sx = (w - 1) / (grid - 1)
    sy = (h - 1) / (grid - 1)
    gx = np.clip(x / sx, 0.0, grid - 1.0)
    gy = np.clip(y / sy, 0.0, grid - 1.0)
    ix = np.minimum(np.floor(gx).astype(np.int64), grid - 1)
    iy = np.minimum(np.floor(gy).astype(np.int64), grid - 1)
    wx = _bspline_weights(gx - ix)
    wy = _bspline_weights(gy - iy)
    padded = np.zeros((grid + 3, grid + 3, 2))
    padded[1 : grid + 1, 1 : grid + 1] = ctrl
    dx = np.zeros_like(gx)
    dy = np.zeros_like(gy)
    for m in range(4):
        for n in range(4):
            c = padded[iy + m, ix + n]
            wmn = wy[m] * wx[n]
            dx += wmn * c[..., 0]
            dy += wmn * c[..., 1]
    return dx, dy


def free_form_deform(
    img: Image2D,
    lms: LandmarkSet,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    ctrl: Optional[np.ndarray] = None,
) -> tuple[Image2D, LandmarkSet]:
    """Warp image and landmarks by a random cubic B-spline lattice field.

    Landmarks move by the forward displacement evaluated at their location;
    the image is resampled through the backward map (the numerical inverse of
    the forward field, found by fixed-point iteration) so pixel content and
    landmarks move together to sub-pixel agreement.
    """
    if ctrl is None:
        m = cfg.ffd_max_disp_px
        ctrl = rng.uniform(-m, m, size=(cfg.ffd_grid, cfg.ffd_grid, 2))
    ctrl = np.asarray(ctrl, dtype=np.float64)
    if np.max(np.abs(ctrl)) == 0.0:
        return img, lms
    h, w = img.shape

    pts = lms.points.copy()
    pres = lms.present
    fdx, fdy = _ffd_field(ctrl, pts[pres, 0], pts[pres, 1], img.shape)
    pts[pres, 0] += fdx
    pts[pres, 1] += fdy
    out_lms = _drop_ejected(pts, lms.present, img.shape)

    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_x, src_y = xx.copy(), yy.copy()
    for _ in range(8):
        dx, dy = _ffd_field(ctrl, src_x, src_y, img.shape)
        src_x = xx - dx
        src_y = yy - dy
    out_pix = _warp_image(img.pixels, src_x, src_y)
    return Image2D(out_pix, img.spacing), out_lms


def augment_sample(
    img: Image2D, lms: LandmarkSet, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[Image2D, LandmarkSet]:
    """Compose the full augmentation pipeline on one training pair."""
    if cfg.enable_flips:
        if rng.random() < cfg.p_flip_h:
            img, lms = apply_geometric(img, lms, GeomTransform.flip_h())
        if rng.random() < cfg.p_flip_v:
            img, lms = apply_geometric(img, lms, GeomTransform.flip_v())
    if cfg.enable_transpose and img.height == img.width and rng.random() < cfg.p_transpose:
        img, lms = apply_geometric(img, lms, GeomTransform.transpose())
    if cfg.enable_rotate and cfg.rot_max_deg > 0:
        angle = rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg)
        img, lms = apply_geometric(img, lms, GeomTransform.rotate(angle))
    if cfg.enable_shift and cfg.shift_max_frac > 0:
        dx = rng.uniform(-cfg.shift_max_frac, cfg.shift_max_frac) * img.width
        dy = rng.uniform(-cfg.shift_max_frac, cfg.shift_max_frac) * img.height
        img, lms = apply_geometric(img, lms, GeomTransform.shift(dx, dy))
    if cfg.enable_ffd and cfg.ffd_max_disp_px > 0:
        img, lms = free_form_deform(img, lms, cfg, rng)
    if cfg.enable_kspace and cfg.kspace_drop_rate > 0:
        img = kspace_dropout(img, cfg.kspace_drop_rate, rng, mode=cfg.kspace_mode)
    if cfg.enable_intensity and cfg.intensity_shift_amp > 0:
        img = intensity_shift(img, cfg.intensity_shift_amp, rng)
    if cfg.enable_noise and cfg.noise_sigma > 0:
        img = add_noise(img, cfg.noise_sigma, rng)
    return img, lms
