"""Exception types shared across the package.

Grouped here so callers can catch the common base without importing
every module they interact with.
"""


class FlashError(Exception):
    """Base class for all package-specific failures."""


# ---------------------------------------------------------------------------
# pipeline space


class PathCountExceedsLimit(FlashError):
    """Raised when path enumeration would exceed the configured cap."""

    def __init__(self, total: int, limit: int):
        super().__init__(
            f"pipeline space holds {total} paths, above the enumeration limit of {limit}"
        )
        self.total = total
        self.limit = limit


class UnknownAlgorithm(FlashError):
    """An algorithm id does not exist in the step it was named for."""


class EdgeViolation(FlashError):
    """A path uses a transition that is not in the edge set."""


class EmptyPathSet(FlashError):
    """An operation that needs at least one path received none."""


# ---------------------------------------------------------------------------
# models


class DimensionMismatch(FlashError):
    """Design matrix, target vector, or encoding sizes disagree."""


class NonSymmetricInput(FlashError):
    """A matrix that must be symmetric is not."""


class EmptyHistory(FlashError):
    """A density model was asked to build from zero records."""


# ---------------------------------------------------------------------------
# execution


class StepTimeout(FlashError):
    """A pipeline step ran past its time allowance."""


class ExecutorFailure(FlashError):
    """A step failed for a reason other than a timeout."""


class HandshakeFailure(FlashError):
    """An external worker did not complete the hello exchange."""


class ProtocolViolation(FlashError):
    """An external worker sent a frame that breaks the wire contract."""


class WorkerExited(FlashError):
    """The external worker process ended while a response was pending."""


# ---------------------------------------------------------------------------
# orchestration


class BudgetTooSmall(FlashError):
    """The configured budget does not allow even one completed run."""


class ConfigParseError(FlashError):
    """A pipeline spec file or CLI argument could not be parsed."""


class TraceParseError(FlashError):
    """A trace file is missing, empty, or malformed."""
