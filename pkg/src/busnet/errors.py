"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``busnet.cli``).
"""


class BusnetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(BusnetError):
    exit_code = 1


class ConfigError(BusnetError, ValueError):
    exit_code = 1


class DimensionError(BusnetError, ValueError):
    exit_code = 1


class DataError(BusnetError):
    exit_code = 2


class NumericalError(BusnetError, FloatingPointError):
    exit_code = 3
