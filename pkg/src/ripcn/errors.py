"""Exception taxonomy.

Every error carries the process exit code the CLI maps it to:
2 configuration, 3 data, 4 numerical failure.
"""


class RipcnError(Exception):
    exit_code = 1


class ConfigError(RipcnError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """An operation argument is outside its admissible range."""


class CompatibilityError(ConfigError):
    """A checkpoint does not match the run it is loaded into."""


class DataError(RipcnError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class DegenerateInputError(DataError):
    """Input values make a formula undefined (zero occupancy, zero std, ...)."""


class DependencyError(DataError):
    """A command needs artifacts produced by an earlier command."""


class StateError(RipcnError, RuntimeError):
    """An object was used before it was fitted."""


class DimensionError(RipcnError, ValueError):
    exit_code = 4


class ContractError(RipcnError, RuntimeError):
    exit_code = 4


class NumericalError(RipcnError, ArithmeticError):
    exit_code = 4


class DegeneracyError(NumericalError):
    """Gram-Schmidt hit a (near) linearly dependent direction."""

    def __init__(self, index, norm):
        super().__init__(
            f"component {index} is degenerate after orthogonalization "
            f"(residual norm {norm:.3e})"
        )
        self.index = index
        self.norm = norm


class TrainingError(NumericalError):
    pass
