"""Exception hierarchy.

Errors fall into two families so the CLI can map them onto exit codes:
``DataError`` for bad inputs, configs and state files, ``TrainingFailure``
for problems that only surface while running.
"""

from __future__ import annotations


class EffiqaError(Exception):
    """Base class for every error raised by this package."""


class DataError(EffiqaError, ValueError):
    """Invalid input data, configuration or on-disk artifact."""


class TrainingFailure(EffiqaError, RuntimeError):
    """A run failed after its inputs were accepted."""


# metrics / losses
class ConstantSequence(DataError):
    pass


class ConstantPredictions(ConstantSequence):
    pass


class ConstantTargets(ConstantSequence):
    pass


class LengthMismatch(DataError):
    pass


class EmptyBatch(DataError):
    pass


class BatchTooSmall(DataError):
    pass


# regressor / optimizer
class ShapeMismatch(DataError):
    pass


class StaleCache(ShapeMismatch):
    pass


class UnsupportedVersion(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class NonFiniteGradient(TrainingFailure):
    pass


# dataset
class TooFewSamples(DataError):
    pass


class DegenerateScale(DataError):
    pass


class MissingPrediction(DataError):
    pass


class AlreadyLabeled(DataError):
    pass


class DuplicateId(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PoolOverlap(DataError):
    pass


# preprocess
class MalformedHeader(DataError):
    pass


class TruncatedPixelData(DataError):
    pass


class UnsupportedMagic(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class BadFeatureDim(DataError):
    pass


# pipeline
class DivergedTraining(TrainingFailure):
    pass


class StageDependencyViolation(DataError):
    pass


class ConfigDigestMismatch(DataError):
    pass


class ConfigError(DataError):
    pass
