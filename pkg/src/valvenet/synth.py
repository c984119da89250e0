"""Synthetic cardiac phantom: labelled cine sequences with known motion.

Each sequence renders a bright-blood chamber silhouette deforming through one
cycle. The three views are visually distinct (one chamber in 2CH, chamber
plus outflow channel in 3CH, two chambers in 4CH) so a network has to learn
view identity to emit the correct landmark ids.

Motion is programmed exactly: each valve's annulus midpoint moves along a
fixed ray from a stationary apex point with a raised-cosine temporal profile,
so the apex-to-midpoint distance is L(t) = L_ed * (1 + s * w(t)) and the
recovered long-axis strain equals the target s at the profile trough. The
annulus pair sits symmetrically about the midpoint; its halfwidth shrinks
just enough that each landmark's total ED-to-ES displacement equals the
programmed excursion. End-diastole is frame 0, end-systole the trough frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    VALVE_PAIRS,
    Image2D,
    LandmarkSet,
    SequenceRecord,
    Valve,
    ViewLabel,
    quantize_intensity,
    save_sequence,
    write_manifest,
)
from .errors import GeometryError

BORDER_MARGIN_PX = 8.0  # landmarks keep this margin so trackers can window them


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple[int, int] = (64, 64)
    frames_per_cycle: int = 30
    view: ViewLabel = ViewLabel.CH4
    spacing_mm: tuple[float, float] = (2.5, 2.5)
    peak_strain_target: float = -0.15
    axis_len_px: float = 32.0
    chamber_halfwidth_px: float = 9.0
    wall_px: float = 3.0
    excursion_mm: Optional[dict[Valve, float]] = None
    apex_xy: Optional[tuple[float, float]] = None
    tilt_deg: float = 0.0
    blood: float = 0.85
    myocardium: float = 0.45
    background: float = 0.12
    atrium_blood: float = 0.68
    texture_amp: float = 0.08
    noise_sigma: float = 0.01
    subject_id: str = "phantom"

    def __post_init__(self):
        if self.frames_per_cycle < 2:
            raise GeometryError("frames_per_cycle must be at least 2")
        if min(self.image_size) < 32:
            raise GeometryError("phantom images must be at least 32x32")
        if self.spacing_mm[0] != self.spacing_mm[1]:
            raise GeometryError("phantom motion is programmed in mm; spacing must be isotropic")
        if self.spacing_mm[0] <= 0:
            raise GeometryError("spacing must be positive")
        if not -0.9 < self.peak_strain_target < 0.9:
            raise GeometryError("peak_strain_target must lie in (-0.9, 0.9)")
        if self.excursion_mm is not None and any(v < 0 for v in self.excursion_mm.values()):
            raise GeometryError("excursions must be nonnegative")
        if self.axis_len_px <= 4 or self.chamber_halfwidth_px <= 1:
            raise GeometryError("chamber geometry too small to render")


# Per-view layout: valve placements relative to the config's base geometry.
# angle is degrees off straight-down from the apex; the lateral landmark of
# each pair (second id) sits on lat_sign * perp.
_VIEW_PLANS = {
    ViewLabel.CH2: {
        "apex_frac": (0.50, 0.14),
        "valves": [
            dict(valve=Valve.MITRAL, angle=6.0, len_scale=1.0, width_scale=1.0,
                 lat_sign=+1.0, channel=False),
        ],
    },
    ViewLabel.CH3: {
        "apex_frac": (0.44, 0.15),
        "valves": [
            dict(valve=Valve.MITRAL, angle=-7.0, len_scale=1.0, width_scale=1.0,
                 lat_sign=+1.0, channel=False),
            dict(valve=Valve.AORTIC, angle=45.0, len_scale=0.72, width_scale=0.5,
                 lat_sign=+1.0, channel=True),
        ],
    },
    ViewLabel.CH4: {
        "apex_frac": (0.47, 0.14),
        "valves": [
            dict(valve=Valve.MITRAL, angle=-9.0, len_scale=1.0, width_scale=0.89,
                 lat_sign=-1.0, channel=False),
            dict(valve=Valve.TRICUSPID, angle=19.0, len_scale=0.875, width_scale=0.78,
                 lat_sign=+1.0, channel=False),
        ],
    },
}


@dataclass(frozen=True)
class _ValvePlan:
    valve: Valve
    ids: tuple[int, int]  # (medial/septal id, lateral id)
    u: np.ndarray         # unit long-axis direction, apex -> annulus
    perp: np.ndarray
    lat_sign: float
    l_ed: float
    h_ed: float
    delta_h: float
    channel: bool         # render as outflow channel instead of full chamber


def _temporal_profile(n_frames: int) -> np.ndarray:
    t = np.arange(n_frames)
    return (1.0 - np.cos(2.0 * np.pi * t / n_frames)) / 2.0


def programmed_excursion_mm(cfg: PhantomConfig, valve: Valve) -> float:
    """The excursion each landmark of this valve travels between ED and ES."""
    plan = _plan_for(cfg, valve)
    w_es = _temporal_profile(cfg.frames_per_cycle)[cfg.frames_per_cycle // 2]
    dl = abs(cfg.peak_strain_target) * plan.l_ed * w_es
    dh = plan.delta_h * w_es
    return math.hypot(dl, dh) * cfg.spacing_mm[0]


def _plan_for(cfg: PhantomConfig, valve: Valve) -> "_ValvePlan":
    for plan in _build_plans(cfg):
        if plan.valve == valve:
            return plan
    raise GeometryError(f"view {cfg.view.value} does not place the {valve.value} valve")


def _apex(cfg: PhantomConfig) -> np.ndarray:
    if cfg.apex_xy is not None:
        return np.asarray(cfg.apex_xy, dtype=np.float64)
    fx, fy = _VIEW_PLANS[cfg.view]["apex_frac"]
    h, w = cfg.image_size
    return np.array([fx * w, fy * h])


def _build_plans(cfg: PhantomConfig) -> list[_ValvePlan]:
    plans = []
    spacing = cfg.spacing_mm[0]
    for entry in _VIEW_PLANS[cfg.view]["valves"]:
        valve = entry["valve"]
        angle = math.radians(entry["angle"] + cfg.tilt_deg)
        u = np.array([math.sin(angle), math.cos(angle)])
        perp = np.array([u[1], -u[0]])
        l_ed = cfg.axis_len_px * entry["len_scale"]
        h_ed = cfg.chamber_halfwidth_px * entry["width_scale"]
        dl_full = abs(cfg.peak_strain_target) * l_ed
        if cfg.excursion_mm is not None and valve in cfg.excursion_mm:
            exc_px = cfg.excursion_mm[valve] / spacing
            if exc_px < dl_full - 1e-9:
                raise GeometryError(
                    f"{valve.value} excursion {cfg.excursion_mm[valve]} mm is below the "
                    f"longitudinal motion {dl_full * spacing:.3f} mm implied by the "
                    f"strain target"
                )
            delta_h = math.sqrt(max(exc_px**2 - dl_full**2, 0.0))
        else:
            delta_h = 0.0
        if h_ed - delta_h < 1.5:
            raise GeometryError(
                f"{valve.value} annulus would collapse: halfwidth {h_ed} vs "
                f"width change {delta_h:.2f}"
            )
        plans.append(
            _ValvePlan(
                valve=valve,
                ids=VALVE_PAIRS[cfg.view][valve],
                u=u,
                perp=perp,
                lat_sign=entry["lat_sign"],
                l_ed=l_ed,
                h_ed=h_ed,
                delta_h=delta_h,
                channel=entry["channel"],
            )
        )
    return plans


def _frame_landmarks(
    cfg: PhantomConfig, plans: list[_ValvePlan], apex: np.ndarray, w_t: float
) -> dict[int, np.ndarray]:
    out = {}
    for p in plans:
        length = p.l_ed * (1.0 + cfg.peak_strain_target * w_t)
        half = p.h_ed - p.delta_h * w_t
        mid = apex + p.u * length
        medial_id, lateral_id = p.ids
        out[lateral_id] = mid + p.lat_sign * half * p.perp
        out[medial_id] = mid - p.lat_sign * half * p.perp
    return out


def _check_geometry(cfg: PhantomConfig, plans: list[_ValvePlan], apex: np.ndarray) -> None:
    h, w = cfg.image_size
    profile = _temporal_profile(cfg.frames_per_cycle)
    for w_t in (0.0, float(profile.max())):
        for lid, pt in _frame_landmarks(cfg, plans, apex, w_t).items():
            x, y = pt
            if not (
                BORDER_MARGIN_PX <= x <= w - 1 - BORDER_MARGIN_PX
                and BORDER_MARGIN_PX <= y <= h - 1 - BORDER_MARGIN_PX
            ):
                raise GeometryError(
                    f"landmark {lid} at ({x:.1f}, {y:.1f}) violates the "
                    f"{BORDER_MARGIN_PX} px border margin in a {w}x{h} image"
                )


def _smoothstep(d: np.ndarray, edge: float = 1.2) -> np.ndarray:
    """0 -> 1 ramp of width ``edge`` centred on d = 0 (d = signed inside distance)."""
    return np.clip(d / edge + 0.5, 0.0, 1.0)


def _blend(img: np.ndarray, level: float, alpha: np.ndarray) -> np.ndarray:
    return img * (1.0 - alpha) + level * alpha


def _render_frame(
    cfg: PhantomConfig,
    plans: list[_ValvePlan],
    apex: np.ndarray,
    w_t: float,
    texture: np.ndarray,
) -> np.ndarray:
    h, w = cfg.image_size
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    img = np.full((h, w), cfg.background)

    pools, walls, atria, lines = [], [], [], []
    for p in plans:
        length = p.l_ed * (1.0 + cfg.peak_strain_target * w_t)
        half = p.h_ed - p.delta_h * w_t
        mid = apex + p.u * length
        rel_x, rel_y = xx - apex[0], yy - apex[1]
        ax = rel_x * p.u[0] + rel_y * p.u[1]
        lat = np.abs(rel_x * p.perp[0] + rel_y * p.perp[1])
        s = np.clip(ax / length, 0.0, 1.0)
        if p.channel:
            # outflow channel: near-constant width, starts partway down the axis
            prof = half * (0.55 + 0.45 * np.sin(np.pi * s / 2.0))
            start = 0.45 * length
        else:
            prof = half * np.sin(np.pi * s / 2.0)
            start = 0.0
        inside_lat = _smoothstep(prof - lat)
        inside_ax = _smoothstep(ax - start) * _smoothstep(length - ax)
        pools.append(inside_lat * inside_ax)
        wall_lat = _smoothstep(prof + cfg.wall_px - lat)
        wall_ax = _smoothstep(ax - start + cfg.wall_px) * _smoothstep(length + cfg.wall_px - ax)
        walls.append(wall_lat * wall_ax)

        # cavity on the far side of the valve plane: atrium, or aorta for channels
        far_len = 0.28 * length if not p.channel else 0.2 * length
        far_half = 0.8 * half
        centre = mid + p.u * (1.6 + far_len / 2.0)
        crel_x, crel_y = xx - centre[0], yy - centre[1]
        cax = crel_x * p.u[0] + crel_y * p.u[1]
        clat = crel_x * p.perp[0] + crel_y * p.perp[1]
        ell = 1.0 - (cax / (far_len / 2.0)) ** 2 - (clat / far_half) ** 2
        atria.append(_smoothstep(ell * far_half))

        # dark annulus line through the valve plane
        vax = rel_x * p.u[0] + rel_y * p.u[1] - length
        vlat = np.abs(rel_x * p.perp[0] + rel_y * p.perp[1])
        line = _smoothstep(0.8 - np.abs(vax)) * _smoothstep(half + 1.8 - vlat)
        lines.append(line)

    img = _blend(img, cfg.myocardium, np.max(walls, axis=0))
    img = _blend(img, cfg.blood, np.max(pools, axis=0))
    img = _blend(img, cfg.atrium_blood, np.max(atria, axis=0))
    img = _blend(img, 0.2, np.max(lines, axis=0))
    img = img * (1.0 + cfg.texture_amp * texture)
    return img


def _make_texture(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Static multi-octave smooth noise field, roughly unit scale."""
    from scipy.ndimage import zoom

    h, w = shape
    tex = np.zeros(shape)
    for cells, weight in ((5, 1.0), (9, 0.5), (17, 0.25)):
        coarse = rng.standard_normal((cells, cells))
        tex += weight * zoom(coarse, (h / cells, w / cells), order=1)[:h, :w]
    tex /= max(tex.std(), 1e-9)
    return tex


def generate_phantom_sequence(cfg: PhantomConfig, rng: np.random.Generator) -> SequenceRecord:
    """Render one labelled cine sequence; deterministic given (cfg, rng state)."""
    apex = _apex(cfg)
    plans = _build_plans(cfg)
    _check_geometry(cfg, plans, apex)
    profile = _temporal_profile(cfg.frames_per_cycle)
    texture = _make_texture(cfg.image_size, rng)

    frames, landmark_sets = [], []
    for w_t in profile:
        pix = _render_frame(cfg, plans, apex, float(w_t), texture)
        if cfg.noise_sigma > 0:
            pix = pix + rng.normal(0.0, cfg.noise_sigma, size=pix.shape)
        pix = quantize_intensity(np.clip(pix, 0.0, 1.0))
        frames.append(Image2D(pix, cfg.spacing_mm))
        coords = _frame_landmarks(cfg, plans, apex, float(w_t))
        landmark_sets.append(LandmarkSet.from_mapping({k: tuple(v) for k, v in coords.items()}))

    return SequenceRecord(
        frames=frames,
        view=cfg.view,
        landmarks=landmark_sets,
        subject_id=cfg.subject_id,
        apex=(float(apex[0]), float(apex[1])),
        ed_frame=0,
        es_frame=cfg.frames_per_cycle // 2,
    )


@dataclass(frozen=True)
class PhantomRanges:
    """Uniform per-subject sampling ranges for dataset generation."""

    axis_len_px: tuple[float, float] = (28.0, 34.0)
    halfwidth_px: tuple[float, float] = (8.0, 10.0)
    tilt_deg: tuple[float, float] = (-5.0, 5.0)
    apex_jitter_px: float = 2.0
    peak_strain: tuple[float, float] = (-0.18, -0.12)
    blood: tuple[float, float] = (0.78, 0.9)
    myocardium: tuple[float, float] = (0.4, 0.5)
    background: tuple[float, float] = (0.08, 0.16)
    texture_amp: tuple[float, float] = (0.05, 0.1)
    noise_sigma: tuple[float, float] = (0.005, 0.02)


def _sample_subject_config(
    base: PhantomConfig, ranges: PhantomRanges, rng: np.random.Generator
) -> PhantomConfig:
    u = rng.uniform
    return replace(
        base,
        axis_len_px=u(*ranges.axis_len_px),
        chamber_halfwidth_px=u(*ranges.halfwidth_px),
        tilt_deg=u(*ranges.tilt_deg),
        peak_strain_target=u(*ranges.peak_strain),
        blood=u(*ranges.blood),
        myocardium=u(*ranges.myocardium),
        background=u(*ranges.background),
        texture_amp=u(*ranges.texture_amp),
        noise_sigma=u(*ranges.noise_sigma),
    )


def generate_dataset(
    out_dir: str | Path,
    n_subjects: int,
    seed: int,
    base: Optional[PhantomConfig] = None,
    ranges: Optional[PhantomRanges] = None,
    val_fraction: float = 0.25,
) -> Path:
    """Write a labelled multi-view dataset with a train/val split by subject.

    Every subject gets one sequence per view with shared randomized geometry.
    Output is deterministic in ``seed``: identical seeds reproduce the
    directory byte for byte.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be at least 1")
    base = base if base is not None else PhantomConfig()
    ranges = ranges if ranges is not None else PhantomRanges()
    out_dir = Path(out_dir)
    (out_dir / "seqs").mkdir(parents=True, exist_ok=True)

    subject_streams = np.random.SeedSequence(seed).spawn(n_subjects)
    subjects, sequences = [], []
    for i, stream in enumerate(subject_streams):
        rng = np.random.default_rng(stream)
        sid = f"s{i:03d}"
        subjects.append(sid)
        subj_cfg = _sample_subject_config(base, ranges, rng)
        apex_dx, apex_dy = rng.uniform(-ranges.apex_jitter_px, ranges.apex_jitter_px, 2)
        for view in (ViewLabel.CH2, ViewLabel.CH3, ViewLabel.CH4):
            cfg = replace(subj_cfg, view=view, subject_id=sid)
            apex = _apex(cfg) + np.array([apex_dx, apex_dy])
            cfg = replace(cfg, apex_xy=(float(apex[0]), float(apex[1])))
            record = generate_phantom_sequence(cfg, rng)
            rel = f"seqs/{sid}_{view.value}.json"
            save_sequence(record, out_dir / rel)
            sequences.append({"subject": sid, "view": view.value, "path": rel})

    n_val = max(1, round(n_subjects * val_fraction)) if n_subjects > 1 else 0
    val_subjects = set(subjects[n_subjects - n_val :]) if n_val else set()
    train = [s["path"] for s in sequences if s["subject"] not in val_subjects]
    val = [s["path"] for s in sequences if s["subject"] in val_subjects]
    write_manifest(
        out_dir,
        {
            "schema_version": 1,
            "seed": seed,
            "subjects": subjects,
            "sequences": sequences,
            "train": train,
            "val": val,
        },
    )
    return out_dir
