"""Package-wide exception types, grouped so the CLI can map them to exit codes."""

from __future__ import annotations


class RavqaError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(RavqaError):
    """An argument or call sequence violated a documented precondition."""


class ShapeError(ContractViolation):
    """Tensor shapes incompatible with the requested operation."""


class DataError(RavqaError):
    """Malformed manifest, vocabulary, or sample content."""


class CheckpointError(RavqaError):
    """Unreadable or inconsistent checkpoint container."""


class DivergenceError(RavqaError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class GradCheckError(RavqaError):
    """The finite-difference oracle could not be applied."""


class TransportError(RavqaError):
    """A remote generator call failed before producing a usable response."""


class TransitionError(RavqaError):
    """The requested operation is not legal from the record's current state."""


class VersionConflictError(RavqaError):
    """Optimistic-concurrency token did not match the stored record."""

    def __init__(self, record_id: str, expected: int, actual: int):
        super().__init__(
            f"record {record_id!r}: expected version {expected}, stored version is {actual}"
        )
        self.record_id = record_id
        self.expected = expected
        self.actual = actual
