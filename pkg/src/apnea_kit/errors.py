"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the CLI can map it without a lookup
table: 1 = user/config error, 2 = data error, 3 = internal invariant violation.
"""

from __future__ import annotations


class ApneaKitError(Exception):
    exit_code = 3


class ConfigError(ApneaKitError):
    exit_code = 1


class DataError(ApneaKitError):
    exit_code = 2


class LoadError(DataError):
    """Malformed bundle file; message names file and line."""


class DegenerateSignal(DataError):
    pass


class DegenerateInput(DataError):
    pass


class EmptySlice(DataError):
    pass


class MissingSignal(DataError):
    pass


class ZeroSleep(DataError):
    pass


class SingleClass(DataError):
    pass


class NoPositives(DataError):
    pass


class TooFew(DataError):
    pass


class TooFewSubjects(ConfigError):
    pass


class DegenerateVariance(DataError):
    pass


class DegenerateMatrix(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class CorruptModel(DataError):
    pass


class InvariantViolation(ApneaKitError):
    exit_code = 3
