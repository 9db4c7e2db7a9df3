"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: configuration mistakes must never be reported as data corruption
and vice versa.
"""


class FedFixerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedFixerError):
    """Invalid configuration: bad field values, shape mismatches, unknown keys."""


class DataError(FedFixerError):
    """Unreadable or inconsistent input data (bad magic numbers, count mismatches)."""


class NumericsError(FedFixerError):
    """Non-finite values encountered during training; the trial must abort."""
