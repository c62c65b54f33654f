"""Exception types raised across difflab."""


class DiffLabError(Exception):
    """Base class for all difflab errors."""


class DomainError(DiffLabError, ValueError):
    """An argument lies outside the region where an operation is defined."""


class ScheduleError(DiffLabError, ValueError):
    """A noise schedule violates monotonicity or is degenerate."""


class ContractError(DiffLabError, ValueError):
    """An operation was called on inputs that break its stated precondition."""


class NumericalError(DiffLabError, ArithmeticError):
    """A computation produced non-finite or unstable values.

    ``time`` carries the offending time when one is known.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class ConfigError(DiffLabError, ValueError):
    """A configuration file or mapping could not be parsed.

    ``field`` is a dotted path to the offending key, ``line`` the line number
    in the source text when the failure is a syntax error.
    """

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.message = message
        self.field = field
        self.line = line

    def __str__(self):
        loc = []
        if self.field:
            loc.append(f"field '{self.field}'")
        if self.line is not None:
            loc.append(f"line {self.line}")
        return f"{self.message} ({', '.join(loc)})" if loc else self.message
