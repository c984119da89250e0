"""Ten-point cardiac valve landmark regression toolkit.

Synthesises labelled long-axis cine phantoms, trains a dilated-dense-block
coordinate regression network with curriculum minibatch sampling, evaluates
per-landmark pixel error against a Lucas-Kanade tracking baseline, and
derives clinical measures (long-axis strain, MAPSE/TAPSE) from landmark
trajectories.
"""

__version__ = "0.1.0"

from .core import (
    Image2D,
    LandmarkSet,
    SequenceRecord,
    Valve,
    ViewLabel,
    landmarks_for_view,
    load_sequence,
    save_sequence,
)

__all__ = [
    "Image2D",
    "LandmarkSet",
    "SequenceRecord",
    "Valve",
    "ViewLabel",
    "landmarks_for_view",
    "load_sequence",
    "save_sequence",
    "__version__",
]
