"""Exception types shared across the package.

Everything data-shaped derives from ValueError so generic callers can catch
one base; numeric failures derive from RuntimeError and map to a distinct
CLI exit code.
"""


class BeamgridError(Exception):
    """Base class for package-specific failures."""


class GridParseError(BeamgridError, ValueError):
    """Malformed grid/path/config file; message names the byte offset."""


class NoValidSiteError(BeamgridError, ValueError):
    """No rooftop-edge pixel available for transmitter placement."""


class EmptyTrainingSetError(BeamgridError, ValueError):
    """Training requested with zero valid pixels."""


class InsufficientDataError(BeamgridError, ValueError):
    """Fewer scenes than required to populate train/val/test splits."""


class UnsupportedFormError(BeamgridError, ValueError):
    """Loss invoked with a logits form it does not define (joint vs sep)."""


class NumericError(BeamgridError, RuntimeError):
    """Base for numeric failures (CLI exit code 4)."""


class IterationLimitError(NumericError):
    """Iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, achieved_tol=None):
        super().__init__(message)
        self.achieved_tol = achieved_tol


class UndefinedResultError(NumericError):
    """Requested statistic has an empty or all-zero denominator."""
