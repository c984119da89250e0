"""Exception types raised across the toolkit.

Errors fall into two broad families used by the CLI to pick exit codes:
``ConfigError`` (and argparse usage errors) map to exit code 2, every other
``ValvenetError`` raised at runtime maps to exit code 1.
"""


class ValvenetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ValvenetError):
    """Invalid or inconsistent run configuration (CLI exit code 2)."""


# --- annotation / sequence I-O ---------------------------------------------

class MissingFile(ValvenetError):
    """A referenced file or directory does not exist."""


class SchemaViolation(ValvenetError):
    """Annotation JSON has missing, extra or malformed fields."""


class InvariantViolation(ValvenetError):
    """A structurally valid file breaks a domain invariant."""


class ZeroSentinelConflict(InvariantViolation):
    """A landmark marked present is annotated exactly at the (0,0) sentinel."""


# --- model ------------------------------------------------------------------

class SpecError(ValvenetError):
    """Invalid network specification (wrong depth, channel chain, size)."""


class ShapeError(ValvenetError):
    """Tensor or array shape does not match the expected contract."""


# --- training ---------------------------------------------------------------

class NonFiniteLoss(ValvenetError):
    """Training loss became NaN or infinite."""


class VersionMismatch(ValvenetError):
    """Checkpoint was written by an incompatible format version."""


class CorruptCheckpoint(ValvenetError):
    """Checkpoint file is unreadable or truncated."""


# --- curriculum -------------------------------------------------------------

class EmptyLandmarkCohort(ValvenetError):
    """Some landmark id never appears in the validation set."""


# --- metrics ----------------------------------------------------------------

class PresenceMismatch(ValvenetError):
    """Prediction and ground truth disagree on which landmarks are present."""


class MissingApex(ValvenetError):
    """Sequence has no apex annotation, required for strain."""


class MissingLandmark(ValvenetError):
    """A landmark required by a metric is absent in some frame."""

    def __init__(self, frame: int, landmark_id: int):
        super().__init__(f"landmark {landmark_id} absent in frame {frame}")
        self.frame = frame
        self.landmark_id = landmark_id


class WrongView(ValvenetError):
    """Metric requested on a view that does not define it."""


class MissingFrameIndex(ValvenetError):
    """ED or ES frame index required but not annotated."""


# --- tracker ----------------------------------------------------------------

class InitOutOfBounds(ValvenetError):
    """Tracker initialised with a point too close to the image border."""


# --- synthesis --------------------------------------------------------------

class GeometryError(ValvenetError):
    """Phantom geometry does not fit the image or is self-inconsistent."""
