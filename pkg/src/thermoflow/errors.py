"""Exception hierarchy shared by all modules.

Each class maps to one CLI exit code so failures surface uniformly:
config 2, data 3, numerics 4.  Shape/contract violations are bugs in
the caller's usage and raise ``DimensionError``/``ContractError``,
which the CLI reports as data errors when triggered by user inputs.
"""


class ThermoflowError(Exception):
    """Base class for all package errors."""


class ConfigError(ThermoflowError):
    """Invalid configuration value, unknown key, or missing referenced file."""

    exit_code = 2


class DataError(ThermoflowError):
    """Unusable input data (missing file, empty raster, undecodable image)."""

    exit_code = 3


class NumericalError(ThermoflowError):
    """Non-finite values or a numerically invalid matrix operation."""

    exit_code = 4


class DimensionError(ThermoflowError):
    """Operand shapes violate an operation's preconditions."""

    exit_code = 3


class ContractError(ThermoflowError):
    """An API was called outside its stated contract (non-scalar loss, missing grads)."""

    exit_code = 3


class StyleLookupError(ThermoflowError, KeyError):
    """Unknown style identifier; the message lists registered ids."""

    exit_code = 2
