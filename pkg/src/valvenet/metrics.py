"""Per-landmark pixel-error evaluation and clinical measures.

Pixel errors are Euclidean distances between predicted and ground-truth
coordinates, reported per landmark id as mean and population standard
deviation. Clinical measures derive from landmark trajectories: long-axis
strain is the normalised change of the apex-to-annulus-midpoint distance
relative to end-diastole, and MAPSE/TAPSE are the displacements of the
lateral mitral/tricuspid landmarks (ids 6 and 10, 4CH view) between
end-diastole and end-systole, in millimetres.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    MAPSE_LANDMARK,
    N_LANDMARKS,
    TAPSE_LANDMARK,
    VALVE_PAIRS,
    LandmarkSet,
    SequenceRecord,
    Valve,
    ViewLabel,
)
from .errors import (
    MissingApex,
    MissingFrameIndex,
    MissingLandmark,
    PresenceMismatch,
    WrongView,
)


@dataclass
class ErrorTable:
    """Per-landmark mean / population-std / count, plus a method label."""

    label: str
    mean: dict[int, float]
    std: dict[int, float]
    count: dict[int, int]
    excluded: dict[int, int] = field(default_factory=dict)

    def row_text(self, landmark_id: int) -> str:
        return f"{self.mean[landmark_id]:.3f} ± {self.std[landmark_id]:.3f}"

    def format_text(self) -> str:
        lines = [f"Landmark | {self.label}", "-" * (11 + max(len(self.label), 14))]
        for lid in sorted(self.mean):
            lines.append(f"{lid:>8} | {self.row_text(lid)}")
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["landmark", "method", "mean_px", "std_px", "count", "excluded"])
            for lid in sorted(self.mean):
                writer.writerow(
                    [lid, self.label, repr(self.mean[lid]), repr(self.std[lid]),
                     self.count[lid], self.excluded.get(lid, 0)]
                )


def comparison_text(tables: Sequence[ErrorTable]) -> str:
    """Aligned multi-method table, one column per ErrorTable."""
    ids = sorted(set().union(*(t.mean.keys() for t in tables)))
    width = max(15, *(len(t.label) for t in tables))
    header = "Landmark | " + " | ".join(f"{t.label:^{width}}" for t in tables)
    lines = [header, "-" * len(header)]
    for lid in ids:
        cells = [
            f"{t.row_text(lid):^{width}}" if lid in t.mean else " " * width
            for t in tables
        ]
        lines.append(f"{lid:>8} | " + " | ".join(cells))
    return "\n".join(lines)


def pixel_errors(
    pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet]
) -> dict[int, np.ndarray]:
    """Per-landmark Euclidean distance samples over aligned frames.

    Presence patterns must agree frame by frame; a prediction that marks a
    landmark present where the ground truth holds the (0,0) sentinel (or
    vice versa) raises ``PresenceMismatch``.
    """
    if len(pred) != len(gt):
        raise PresenceMismatch(f"{len(pred)} predicted frames vs {len(gt)} ground truth")
    samples: dict[int, list[float]] = {i: [] for i in range(1, N_LANDMARKS + 1)}
    for t, (p, g) in enumerate(zip(pred, gt)):
        if not np.array_equal(p.present, g.present):
            raise PresenceMismatch(f"presence patterns differ at frame {t}")
        d = np.linalg.norm(p.points - g.points, axis=1)
        for i in np.flatnonzero(g.present):
            samples[int(i) + 1].append(float(d[i]))
    return {lid: np.asarray(v) for lid, v in samples.items() if v}


def paired_error_samples(
    pred: Sequence[LandmarkSet], gt: Sequence[LandmarkSet]
) -> tuple[dict[int, np.ndarray], dict[int, int], dict[int, int]]:
    """Distance samples over frames where both sides hold the landmark.

    Unlike ``pixel_errors`` this tolerates presence disagreement: returns
    (samples, missing, spurious) where ``missing`` counts frames the ground
    truth has a landmark the prediction lacks and ``spurious`` the reverse.
    """
    if len(pred) != len(gt):
        raise PresenceMismatch(f"{len(pred)} predicted frames vs {len(gt)} ground truth")
    samples: dict[int, list[float]] = {}
    missing: dict[int, int] = {}
    spurious: dict[int, int] = {}
    for p, g in zip(pred, gt):
        d = np.linalg.norm(p.points - g.points, axis=1)
        for i in range(N_LANDMARKS):
            lid = i + 1
            if g.present[i] and p.present[i]:
                samples.setdefault(lid, []).append(float(d[i]))
            elif g.present[i]:
                missing[lid] = missing.get(lid, 0) + 1
            elif p.present[i]:
                spurious[lid] = spurious.get(lid, 0) + 1
    return {k: np.asarray(v) for k, v in samples.items()}, missing, spurious


def summarize_errors(samples: dict[int, np.ndarray], label: str = "network") -> ErrorTable:
    """Reduce distance samples to mean and population standard deviation."""
    mean, std, count = {}, {}, {}
    for lid, values in samples.items():
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            continue
        mean[lid] = float(v.mean())
        std[lid] = float(v.std())  # population std
        count[lid] = int(v.size)
    return ErrorTable(label=label, mean=mean, std=std, count=count)


@dataclass
class StrainCurve:
    """Per-frame fractional length change of one valve, 0 at the reference."""

    valve: Valve
    view: ViewLabel
    values: np.ndarray
    reference_frame: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values[self.reference_frame] != 0.0:
            raise ValueError("strain at the reference frame must be exactly 0")
        if np.any(self.values <= -1.0):
            raise ValueError("strain values must stay above -1")


def _scaled(point: np.ndarray, spacing: tuple[float, float]) -> np.ndarray:
    """Pixel (x, y) to millimetre (x, y); handles anisotropic spacing."""
    row_mm, col_mm = spacing
    return np.array([point[0] * col_mm, point[1] * row_mm])


def _annulus_midpoints(
    seq: SequenceRecord, lms_source: Sequence[LandmarkSet], valve: Valve
) -> np.ndarray:
    pairs = VALVE_PAIRS[seq.view]
    if valve not in pairs:
        raise WrongView(f"view {seq.view.value} does not show the {valve.value} valve")
    id_a, id_b = pairs[valve]
    mids = np.empty((len(lms_source), 2))
    for t, lms in enumerate(lms_source):
        for lid in (id_a, id_b):
            if not lms.is_present(lid):
                raise MissingLandmark(t, lid)
        mids[t] = (lms.get(id_a) + lms.get(id_b)) / 2.0
    return mids


def long_axis_strain(
    seq: SequenceRecord,
    lms_source: Optional[Sequence[LandmarkSet]] = None,
    valve: Valve = Valve.MITRAL,
) -> StrainCurve:
    """Strain(t) = (L(t) - L(ed)) / L(ed) with L the apex-to-midpoint distance.

    ``lms_source`` defaults to the sequence's own annotations; pass predicted
    landmark sets to measure strain from network output.
    """
    if seq.apex is None:
        raise MissingApex(f"sequence {seq.subject_id} has no apex annotation")
    lms_source = seq.landmarks if lms_source is None else lms_source
    mids = _annulus_midpoints(seq, lms_source, valve)
    apex_mm = _scaled(np.asarray(seq.apex), seq.spacing)
    lengths = np.array(
        [np.linalg.norm(_scaled(m, seq.spacing) - apex_mm) for m in mids]
    )
    l_ed = lengths[seq.ed_frame]
    strain = (lengths - l_ed) / l_ed
    return StrainCurve(valve=valve, view=seq.view, values=strain, reference_frame=seq.ed_frame)


def peak_strain(curve: StrainCurve) -> tuple[float, int]:
    """Most negative strain value and its frame; ties go to the earliest frame."""
    idx = int(np.argmin(curve.values))
    return float(curve.values[idx]), idx


def es_frame_estimate(curve: StrainCurve) -> int:
    """Peak-strain frame, used when end-systole is not annotated."""
    return peak_strain(curve)[1]


def mapse_tapse(
    seq: SequenceRecord, lms_source: Optional[Sequence[LandmarkSet]] = None
) -> tuple[float, float]:
    """Annular-plane systolic excursions (mm) of landmarks 6 and 10, 4CH only."""
    if seq.view is not ViewLabel.CH4:
        raise WrongView(f"MAPSE/TAPSE need the CH4 view, got {seq.view.value}")
    if seq.es_frame is None:
        raise MissingFrameIndex("es_frame must be annotated for MAPSE/TAPSE")
    lms_source = seq.landmarks if lms_source is None else lms_source
    ed, es = seq.ed_frame, seq.es_frame
    out = []
    for lid in (MAPSE_LANDMARK, TAPSE_LANDMARK):
        for t in (ed, es):
            if not lms_source[t].is_present(lid):
                raise MissingLandmark(t, lid)
        delta = _scaled(lms_source[es].get(lid), seq.spacing) - _scaled(
            lms_source[ed].get(lid), seq.spacing
        )
        out.append(float(np.linalg.norm(delta)))
    return out[0], out[1]


def strain_table_rows(
    seq: SequenceRecord, lms_source: Optional[Sequence[LandmarkSet]] = None
) -> list[dict]:
    """Plot-ready per-frame rows: strain per valve plus MAPSE/TAPSE on CH4.

    Row keys: subject, view, frame, strain_mitral, strain_aortic,
    strain_tricuspid, mapse_mm, tapse_mm. Valves not shown in the view (and
    the excursions outside CH4) are left empty.
    """
    lms_source = seq.landmarks if lms_source is None else lms_source
    curves = {}
    for valve in VALVE_PAIRS[seq.view]:
        curves[valve] = long_axis_strain(seq, lms_source, valve).values
    mapse = tapse = None
    if seq.view is ViewLabel.CH4 and seq.es_frame is not None:
        mapse, tapse = mapse_tapse(seq, lms_source)
    rows = []
    for t in range(seq.n_frames):
        rows.append(
            {
                "subject": seq.subject_id,
                "view": seq.view.value,
                "frame": t,
                "strain_mitral": curves.get(Valve.MITRAL, [None] * seq.n_frames)[t],
                "strain_aortic": curves.get(Valve.AORTIC, [None] * seq.n_frames)[t],
                "strain_tricuspid": curves.get(Valve.TRICUSPID, [None] * seq.n_frames)[t],
                "mapse_mm": mapse,
                "tapse_mm": tapse,
            }
        )
    return rows


METRIC_CSV_COLUMNS = [
    "subject", "view", "frame",
    "strain_mitral", "strain_aortic", "strain_tricuspid",
    "mapse_mm", "tapse_mm",
]


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in METRIC_CSV_COLUMNS})
