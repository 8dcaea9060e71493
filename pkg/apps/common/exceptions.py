"""
Error hierarchy shared by every NMP app.

Management commands map NmpError to exit code 2; the tile service maps
protocol problems to a MALFORMED frame instead of raising.
"""
from typing import Optional


class NmpError(Exception):
    """Base class for all engine errors."""


class ShapeError(NmpError, ValueError):
    pass


class ConfigurationError(NmpError, ValueError):
    pass


class OutOfExtentError(NmpError, ValueError):
    pass


class TileFormatError(NmpError):
    """Tile bytes could not be parsed; `offset` is where parsing stopped."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StoreIOError(NmpError):
    """Recoverable storage failure; the store state is left unchanged."""


class ProtocolError(NmpError):
    """Wire-protocol violation; the client session must be dropped."""


class ServiceUnavailable(NmpError):
    """Network failure talking to the tile service. Safe to retry."""

    retryable = True


class TrainingDiverged(NmpError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class FleetRunError(NmpError):
    def __init__(self, message: str, partial_report: Optional[dict] = None):
        super().__init__(message)
        self.partial_report = partial_report


class CheckpointFormatError(NmpError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
