"""Exception taxonomy shared across the engine.

The CLI maps these onto exit codes: ValidationError (and subclasses) -> 1,
OracleMismatchError -> 2, CheckpointError and OS-level failures -> 3.
"""


class ValidationError(ValueError):
    """Rejected input: bad shapes, bad ranges, inconsistent arguments."""


class PlanError(ValidationError):
    """Invalid lazy plan (overlapping blocks, out-of-range layers, bad mode)."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class ManifestError(CheckpointError):
    """Manifest is malformed: unparseable JSON, missing fields, bad dtype."""


class TruncatedWeightsError(CheckpointError):
    """Weight blob is shorter than the manifest promises."""


class DimensionMismatchError(CheckpointError):
    """Tensor shapes in the manifest disagree with the stored config."""


class OracleMismatchError(Exception):
    """Production runtime and reference oracle disagree.

    Carries enough context to reproduce the failing case.
    """

    def __init__(self, message, *, case=None):
        super().__init__(message)
        self.case = case
