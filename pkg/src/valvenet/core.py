"""Domain types, the landmark/view taxonomy, and annotation file I/O.

A study consists of cine sequences acquired in one of three long-axis views.
Ten valve landmarks are defined globally: ids 1-6 belong to the mitral valve,
7-8 to the aortic valve and 9-10 to the tricuspid valve. Each view defines a
fixed subset of ids; a landmark that is not defined for a view is recorded at
the (0,0) sentinel and flagged absent.

Annotations are stored as one JSON document per sequence next to a directory
of 16-bit grayscale PNG frames. Coordinates are pixels (x = column,
y = row, origin at the top-left pixel centre), spacing is millimetres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

from .errors import (
    InvariantViolation,
    MissingFile,
    SchemaViolation,
    ZeroSentinelConflict,
)

N_LANDMARKS = 10
SCHEMA_VERSION = 1
PNG_MAX = 65535  # frames are quantised to the 16-bit grid


class ViewLabel(Enum):
    CH2 = "CH2"
    CH3 = "CH3"
    CH4 = "CH4"


class Valve(Enum):
    MITRAL = "mitral"
    AORTIC = "aortic"
    TRICUSPID = "tricuspid"


MITRAL_IDS = frozenset({1, 2, 3, 4, 5, 6})
AORTIC_IDS = frozenset({7, 8})
TRICUSPID_IDS = frozenset({9, 10})

# Which ids each view defines. The split of the six mitral ids across views
# follows the panel order of the standard three-view display (2CH, 3CH, 4CH).
VIEW_LANDMARK_IDS = {
    ViewLabel.CH2: frozenset({1, 2}),
    ViewLabel.CH3: frozenset({3, 4, 7, 8}),
    ViewLabel.CH4: frozenset({5, 6, 9, 10}),
}

# Annulus pair per valve and view; the second id of each pair is the lateral
# landmark (ids 6 and 10 are the ones used for MAPSE/TAPSE in the 4CH view).
VALVE_PAIRS = {
    ViewLabel.CH2: {Valve.MITRAL: (1, 2)},
    ViewLabel.CH3: {Valve.MITRAL: (3, 4), Valve.AORTIC: (7, 8)},
    ViewLabel.CH4: {Valve.MITRAL: (5, 6), Valve.TRICUSPID: (9, 10)},
}

MAPSE_LANDMARK = 6
TAPSE_LANDMARK = 10


def landmarks_for_view(view: ViewLabel) -> frozenset[int]:
    """Fixed landmark id set defined for a view."""
    return VIEW_LANDMARK_IDS[view]


def valve_for_landmark(landmark_id: int) -> Valve:
    if landmark_id in MITRAL_IDS:
        return Valve.MITRAL
    if landmark_id in AORTIC_IDS:
        return Valve.AORTIC
    if landmark_id in TRICUSPID_IDS:
        return Valve.TRICUSPID
    raise InvariantViolation(f"landmark id {landmark_id} outside 1..10")


@dataclass(frozen=True)
class Image2D:
    """A single 2D grayscale frame with physical pixel spacing.

    ``pixels`` is a (height, width) float array of finite intensities,
    ``spacing`` is (row_mm, col_mm). Instances are immutable; the pixel
    buffer is made read-only at construction.
    """

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        pix = np.asarray(self.pixels, dtype=np.float64)
        if pix.ndim != 2:
            raise InvariantViolation(f"pixels must be 2D, got shape {pix.shape}")
        if not np.all(np.isfinite(pix)):
            raise InvariantViolation("pixel intensities must be finite")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise InvariantViolation(f"spacing must be two positive reals, got {self.spacing}")
        pix = pix.copy()
        pix.flags.writeable = False
        object.__setattr__(self, "pixels", pix)
        object.__setattr__(self, "spacing", (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class LandmarkSet:
    """Ten (x, y) pixel coordinates with per-landmark presence flags.

    The sentinel rule is structural: ``present[i]`` is false exactly when
    ``points[i] == (0, 0)``. Landmark ids are 1-based; row i of ``points``
    holds landmark id i+1.
    """

    points: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        pres = np.asarray(self.present, dtype=bool)
        if pts.shape != (N_LANDMARKS, 2):
            raise InvariantViolation(f"points must have shape (10, 2), got {pts.shape}")
        if pres.shape != (N_LANDMARKS,):
            raise InvariantViolation(f"present must have shape (10,), got {pres.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvariantViolation("landmark coordinates must be finite")
        at_origin = (pts[:, 0] == 0.0) & (pts[:, 1] == 0.0)
        if np.any(pres & at_origin):
            bad = int(np.flatnonzero(pres & at_origin)[0]) + 1
            raise ZeroSentinelConflict(f"landmark {bad} marked present at the (0,0) sentinel")
        if np.any(~pres & ~at_origin):
            bad = int(np.flatnonzero(~pres & ~at_origin)[0]) + 1
            raise InvariantViolation(f"absent landmark {bad} must sit exactly at (0,0)")
        pts = pts.copy()
        pts.flags.writeable = False
        pres = pres.copy()
        pres.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "present", pres)

    @classmethod
    def empty(cls) -> "LandmarkSet":
        return cls(np.zeros((N_LANDMARKS, 2)), np.zeros(N_LANDMARKS, dtype=bool))

    @classmethod
    def from_mapping(cls, coords: dict[int, tuple[float, float]]) -> "LandmarkSet":
        """Build from {landmark_id: (x, y)}; ids not given are absent."""
        pts = np.zeros((N_LANDMARKS, 2))
        pres = np.zeros(N_LANDMARKS, dtype=bool)
        for lid, (x, y) in coords.items():
            if not 1 <= lid <= N_LANDMARKS:
                raise InvariantViolation(f"landmark id {lid} outside 1..10")
            pts[lid - 1] = (x, y)
            pres[lid - 1] = True
        return cls(pts, pres)

    def get(self, landmark_id: int) -> np.ndarray:
        """Coordinates of a 1-based landmark id."""
        return self.points[landmark_id - 1]

    def is_present(self, landmark_id: int) -> bool:
        return bool(self.present[landmark_id - 1])

    def present_ids(self) -> frozenset[int]:
        return frozenset(int(i) + 1 for i in np.flatnonzero(self.present))

    def validate_bounds(self, height: int, width: int) -> None:
        """Present landmarks must lie strictly inside (0, width) x (0, height)."""
        pts, pres = self.points, self.present
        ok_x = (pts[:, 0] > 0) & (pts[:, 0] < width)
        ok_y = (pts[:, 1] > 0) & (pts[:, 1] < height)
        if np.any(pres & ~(ok_x & ok_y)):
            bad = int(np.flatnonzero(pres & ~(ok_x & ok_y))[0]) + 1
            raise InvariantViolation(
                f"landmark {bad} at {tuple(pts[bad - 1])} outside image of size "
                f"{width}x{height}"
            )


@dataclass
class SequenceRecord:
    """One cine sequence: frames, view, per-frame landmarks, optional apex.

    Annotations must present exactly the ids the view defines. Records built
    from network predictions or trackers (which may drop or invent points)
    set ``strict_view=False`` to relax that single check; all other
    invariants still hold.
    """

    frames: list[Image2D]
    view: ViewLabel
    landmarks: list[LandmarkSet]
    subject_id: str = "unknown"
    apex: Optional[tuple[float, float]] = None
    ed_frame: int = 0
    es_frame: Optional[int] = None
    strict_view: bool = True

    def __post_init__(self):
        if not self.frames:
            raise InvariantViolation("sequence must contain at least one frame")
        shape = self.frames[0].shape
        spacing = self.frames[0].spacing
        for i, f in enumerate(self.frames):
            if f.shape != shape or f.spacing != spacing:
                raise InvariantViolation(
                    f"frame {i} dims/spacing {f.shape}/{f.spacing} differ from "
                    f"frame 0 {shape}/{spacing}"
                )
        if len(self.landmarks) != len(self.frames):
            raise InvariantViolation(
                f"{len(self.landmarks)} landmark sets for {len(self.frames)} frames"
            )
        expected = landmarks_for_view(self.view)
        h, w = shape
        for i, lms in enumerate(self.landmarks):
            got = lms.present_ids()
            if self.strict_view and got != expected:
                raise InvariantViolation(
                    f"frame {i} annotates ids {sorted(got)} but view "
                    f"{self.view.value} defines {sorted(expected)}"
                )
            lms.validate_bounds(h, w)
        if not 0 <= self.ed_frame < len(self.frames):
            raise InvariantViolation(f"ed_frame {self.ed_frame} out of range")
        if self.es_frame is not None and not 0 <= self.es_frame < len(self.frames):
            raise InvariantViolation(f"es_frame {self.es_frame} out of range")
        if self.apex is not None:
            self.apex = (float(self.apex[0]), float(self.apex[1]))

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def spacing(self) -> tuple[float, float]:
        return self.frames[0].spacing

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


# --- intensity / geometry preprocessing -------------------------------------

def normalize_intensity(img: Image2D) -> Image2D:
    """Rescale intensities linearly to [0, 1]; constant images map to zeros."""
    pix = img.pixels
    lo, hi = float(pix.min()), float(pix.max())
    if hi == lo:
        return Image2D(np.zeros_like(pix), img.spacing)
    return Image2D((pix - lo) / (hi - lo), img.spacing)


def resample_image(img: Image2D, size: tuple[int, int]) -> Image2D:
    """Bilinear resample to (height, width), pixel-centre aligned."""
    h_new, w_new = size
    h, w = img.shape
    if (h_new, w_new) == (h, w):
        return img
    sy, sx = h / h_new, w / w_new
    rows = (np.arange(h_new) + 0.5) * sy - 0.5
    cols = (np.arange(w_new) + 0.5) * sx - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    out = map_coordinates(img.pixels, grid, order=1, mode="nearest")
    spacing = (img.spacing[0] * sy, img.spacing[1] * sx)
    return Image2D(out, spacing)


def scale_landmarks(
    lms: LandmarkSet, from_shape: tuple[int, int], to_shape: tuple[int, int]
) -> LandmarkSet:
    """Map landmark coordinates under the same pixel-centre-aligned resample.

    Present landmarks pushed outside the open (0, w) x (0, h) box by the
    rescale become absent.
    """
    h0, w0 = from_shape
    h1, w1 = to_shape
    sx, sy = w1 / w0, h1 / h0
    pts = lms.points.copy()
    pres = lms.present.copy()
    pts[pres, 0] = (pts[pres, 0] + 0.5) * sx - 0.5
    pts[pres, 1] = (pts[pres, 1] + 0.5) * sy - 0.5
    inside = (pts[:, 0] > 0) & (pts[:, 0] < w1) & (pts[:, 1] > 0) & (pts[:, 1] < h1)
    pts[~(pres & inside)] = 0.0
    return LandmarkSet(pts, pres & inside)


def preprocess_sample(
    img: Image2D, lms: LandmarkSet, size: tuple[int, int]
) -> tuple[Image2D, LandmarkSet]:
    """Network-input preprocessing: resample + landmark rescale + [0,1] norm."""
    out = normalize_intensity(resample_image(img, size))
    return out, scale_landmarks(lms, img.shape, size)


# --- annotation JSON + PNG frames -------------------------------------------

_TOP_KEYS = {
    "schema_version",
    "subject_id",
    "view",
    "spacing_mm",
    "ed_frame",
    "es_frame",
    "apex_xy",
    "frames",
    "landmarks",
}
_FRAME_LM_KEYS = {"points", "present"}


def _require_keys(obj: dict, keys: set[str], where: str) -> None:
    missing = keys - obj.keys()
    extra = obj.keys() - keys
    if missing:
        raise SchemaViolation(f"{where}: missing fields {sorted(missing)}")
    if extra:
        raise SchemaViolation(f"{where}: unknown fields {sorted(extra)}")


def write_frame_png(pixels: np.ndarray, path: Path) -> None:
    """Quantise [0,1] intensities to the 16-bit grid and write a PNG."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * PNG_MAX), 0, PNG_MAX)
    Image.fromarray(arr.astype(np.uint16)).save(path)


def read_frame_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint16:
        raise SchemaViolation(f"{path}: expected 16-bit grayscale PNG, got {arr.dtype}")
    return arr.astype(np.float64) / PNG_MAX


def quantize_intensity(pixels: np.ndarray) -> np.ndarray:
    """Snap [0,1] intensities onto the 16-bit storage grid (round trip exact)."""
    return np.clip(np.rint(pixels * PNG_MAX), 0, PNG_MAX) / PNG_MAX


def save_sequence(record: SequenceRecord, path: str | Path) -> None:
    """Write the annotation JSON and its sibling frame directory.

    Frames land in ``<stem>_frames/frame_NNN.png`` next to the JSON file.
    Loading the result reproduces the record exactly provided frame
    intensities already sit on the 16-bit grid (see ``quantize_intensity``).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames_dir = path.parent / f"{path.stem}_frames"
    frames_dir.mkdir(exist_ok=True)
    rel_paths = []
    for i, frame in enumerate(record.frames):
        fname = f"frame_{i:03d}.png"
        write_frame_png(frame.pixels, frames_dir / fname)
        rel_paths.append(f"{frames_dir.name}/{fname}")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "subject_id": record.subject_id,
        "view": record.view.value,
        "spacing_mm": [record.spacing[0], record.spacing[1]],
        "ed_frame": record.ed_frame,
        "es_frame": record.es_frame,
        "apex_xy": list(record.apex) if record.apex is not None else None,
        "frames": rel_paths,
        "landmarks": [
            {
                "points": lms.points.tolist(),
                "present": [bool(b) for b in lms.present],
            }
            for lms in record.landmarks
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_sequence(path: str | Path, strict_view: bool = True) -> SequenceRecord:
    """Load and fully validate one annotation file.

    ``strict_view=False`` admits prediction/tracking outputs whose presence
    pattern can deviate from the view's defined id set.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"annotation file not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path}: top level must be an object")
    _require_keys(doc, _TOP_KEYS, str(path))
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaViolation(
            f"{path}: schema_version {doc['schema_version']} unsupported "
            f"(expected {SCHEMA_VERSION})"
        )
    try:
        view = ViewLabel(doc["view"])
    except ValueError:
        raise SchemaViolation(f"{path}: unknown view {doc['view']!r}") from None
    spacing = doc["spacing_mm"]
    if (
        not isinstance(spacing, list)
        or len(spacing) != 2
        or not all(isinstance(s, (int, float)) for s in spacing)
    ):
        raise SchemaViolation(f"{path}: spacing_mm must be [row_mm, col_mm]")
    frame_paths = doc["frames"]
    lm_docs = doc["landmarks"]
    if not isinstance(frame_paths, list) or not frame_paths:
        raise SchemaViolation(f"{path}: frames must be a non-empty list")
    if not isinstance(lm_docs, list) or len(lm_docs) != len(frame_paths):
        raise SchemaViolation(
            f"{path}: landmarks must list one entry per frame "
            f"({len(lm_docs)} vs {len(frame_paths)})"
        )

    frames = []
    for rel in frame_paths:
        fpath = path.parent / rel
        if not fpath.is_file():
            raise MissingFile(f"frame referenced by {path} not found: {fpath}")
        pixels = read_frame_png(fpath)
        if min(pixels.shape) < 32:
            raise InvariantViolation(
                f"{fpath}: frames must be at least 32x32, got {pixels.shape}"
            )
        frames.append(Image2D(pixels, (float(spacing[0]), float(spacing[1]))))

    landmark_sets = []
    for i, entry in enumerate(lm_docs):
        if not isinstance(entry, dict):
            raise SchemaViolation(f"{path}: landmarks[{i}] must be an object")
        _require_keys(entry, _FRAME_LM_KEYS, f"{path}: landmarks[{i}]")
        pts, pres = entry["points"], entry["present"]
        if not (isinstance(pts, list) and len(pts) == N_LANDMARKS):
            raise SchemaViolation(f"{path}: landmarks[{i}].points must list 10 pairs")
        if not (isinstance(pres, list) and len(pres) == N_LANDMARKS):
            raise SchemaViolation(f"{path}: landmarks[{i}].present must list 10 flags")
        for p in pts:
            if not (isinstance(p, list) and len(p) == 2):
                raise SchemaViolation(f"{path}: landmarks[{i}] has a malformed point")
        landmark_sets.append(LandmarkSet(np.array(pts, dtype=np.float64), pres))

    ed = doc["ed_frame"]
    es = doc["es_frame"]
    apex = doc["apex_xy"]
    if not isinstance(ed, int):
        raise SchemaViolation(f"{path}: ed_frame must be an integer")
    if es is not None and not isinstance(es, int):
        raise SchemaViolation(f"{path}: es_frame must be an integer or null")
    if apex is not None and not (isinstance(apex, list) and len(apex) == 2):
        raise SchemaViolation(f"{path}: apex_xy must be [x, y] or null")

    return SequenceRecord(
        frames=frames,
        view=view,
        landmarks=landmark_sets,
        subject_id=str(doc["subject_id"]),
        apex=tuple(apex) if apex is not None else None,
        ed_frame=ed,
        es_frame=es,
        strict_view=strict_view,
    )


# --- dataset manifest --------------------------------------------------------

_MANIFEST_KEYS = {"schema_version", "seed", "subjects", "sequences", "train", "val"}


def write_manifest(dataset_dir: str | Path, manifest: dict) -> None:
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    _require_keys(manifest, _MANIFEST_KEYS, "manifest")
    with open(dataset_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(dataset_dir: str | Path) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.is_file():
        raise MissingFile(f"dataset manifest not found: {path}")
    with open(path) as f:
        manifest = json.load(f)
    _require_keys(manifest, _MANIFEST_KEYS, str(path))
    return manifest


def load_split(dataset_dir: str | Path, split: str) -> list[SequenceRecord]:
    """Load every sequence of a manifest split ('train' or 'val')."""
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    return [load_sequence(dataset_dir / rel) for rel in manifest[split]]
