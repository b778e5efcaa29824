"""Exception types shared across the package."""

from __future__ import annotations


class DeepStampError(Exception):
    """Base class; ``code`` is a short stable identifier for logs and the CLI."""

    code = "error"


class FormatError(DeepStampError):
    code = "format"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(FormatError):
    code = "range"


class DimensionError(DeepStampError):
    code = "dimension"


class SpecError(DeepStampError):
    """Invalid stamping/training parameters."""

    code = "spec"


class CheckpointError(FormatError):
    code = "checkpoint"


class MagicMismatch(CheckpointError):
    code = "bad-magic"


class VersionMismatch(CheckpointError):
    code = "bad-version"


class TruncatedPayload(CheckpointError):
    code = "truncated"


class NumericalAbort(DeepStampError):
    """A loss went NaN/Inf; training stopped."""

    code = "numerical"

    def __init__(self, message: str, step: int | None = None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


class InsufficientSamples(DeepStampError):
    code = "insufficient-samples"
