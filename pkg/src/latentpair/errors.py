"""Exception hierarchy.

``InputError`` subclasses map to CLI exit code 2, ``StageError`` subclasses
to exit code 3.
"""

from __future__ import annotations


class LatentPairError(Exception):
    """Base class for all package errors."""


class InputError(LatentPairError, ValueError):
    """Bad user input: files, parameters, configuration."""


class ImageFormatError(InputError):
    pass


class StageError(LatentPairError):
    """A pipeline stage could not produce its output.

    ``stage`` names the failing stage so callers can report diagnostics.
    """

    def __init__(self, message: str, stage: str = "unknown"):
        super().__init__(message)
        self.stage = stage


class DegenerateFitError(StageError):
    def __init__(self, message: str):
        super().__init__(message, stage="fomfe")


class FeatureUnavailable(StageError):
    def __init__(self, message: str):
        super().__init__(message, stage="hex-feature")


class NoCandidatesError(StageError):
    def __init__(self, message: str):
        super().__init__(message, stage="candidates")


class AlignmentFailed(StageError):
    def __init__(self, message: str, stage: str = "alignment"):
        super().__init__(message, stage=stage)


class DegenerateTensorError(StageError):
    def __init__(self, message: str):
        super().__init__(message, stage="tensors")


class ContractViolation(LatentPairError, ValueError):
    """A caller broke a documented precondition."""


class TrainingDiverged(StageError):
    def __init__(self, message: str):
        super().__init__(message, stage="training")
