"""
Error taxonomy shared by every HEML module.

Library code raises these; only the command-line layer turns them into
exit codes (0 success, 1 runtime/data failure, 2 usage error).
"""

from typing import Optional


class HemlError(Exception):
    exit_code = 1


class UsageError(HemlError):
    """Caller asked for something the API does not allow."""
    exit_code = 2


class ShapeError(HemlError):
    pass


class DataError(HemlError):
    pass


class FormatError(HemlError):
    """Binary file or store directory is not what it claims to be."""
    pass


class ParseError(HemlError):
    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class ScheduleError(HemlError):
    pass


class DegenerateError(HemlError):
    """Variance or norm below the 1e-12 guard."""

    def __init__(self, message: str, indices: Optional[list] = None):
        self.indices = list(indices or [])
        super().__init__(message)


class DomainError(HemlError):
    pass


class NumericalError(HemlError):
    pass


class TrainingError(HemlError):
    def __init__(self, message: str, node_id=None):
        self.node_id = node_id
        prefix = f"node {node_id}: " if node_id is not None else ""
        super().__init__(prefix + message)
