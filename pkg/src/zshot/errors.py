"""Exception types shared across the package.

Each maps to a CLI exit code (see ``zshot.cli``).
"""


class ZshotError(Exception):
    exit_code = 1


class ConfigError(ZshotError, ValueError):
    exit_code = 2


class ContractError(ZshotError, ValueError):
    """A precondition or invariant of an operation was violated."""

    exit_code = 3


class DimensionError(ContractError):
    pass


class GeometryError(ContractError):
    pass


class LookupFailure(ContractError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(ContractError):
    pass


class LoadError(ContractError):
    pass


class NumericalError(ZshotError, ArithmeticError):
    """NaN/Inf encountered in a loss or gradient."""

    exit_code = 4
