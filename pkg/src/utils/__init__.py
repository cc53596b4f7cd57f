"""
Utility modules for HEML
Error taxonomy, seed mixing and logging setup
"""

from .errors import (
    HemlError, UsageError, ShapeError, DataError, FormatError, ParseError,
    ScheduleError, DegenerateError, DomainError, NumericalError, TrainingError,
)
from .seeding import splitmix64, mix_seed, make_rng

__all__ = [
    'HemlError', 'UsageError', 'ShapeError', 'DataError', 'FormatError',
    'ParseError', 'ScheduleError', 'DegenerateError', 'DomainError',
    'NumericalError', 'TrainingError', 'splitmix64', 'mix_seed', 'make_rng',
]
