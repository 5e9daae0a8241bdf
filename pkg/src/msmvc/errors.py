"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InvalidInputError -> 2,
NotReadyError -> 3, NumericalError -> 4.
"""


class MsmvcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MsmvcError):
    """Caller handed us something malformed (bad shapes, unknown ids, bad config)."""


class LengthMismatchError(InvalidInputError):
    """Frame-aligned streams disagree on length; message names the offender."""


class IntegrityError(InvalidInputError):
    """A persisted artifact failed its checksum or version check."""


class NotReadyError(MsmvcError):
    """A trained/fitted dependency (extractor, descriptor, checkpoint) is missing."""


class NumericalError(MsmvcError):
    """Non-finite values where finite ones are required (diverged training, bad audio)."""


class UndefinedCorrelationError(MsmvcError):
    """Pearson correlation requested on degenerate (constant) input."""
