"""Exception hierarchy shared by every module of the package."""


class GivaError(Exception):
    """Base class for all errors raised by giva."""


class DimensionError(GivaError, ValueError):
    """Shapes do not compose."""


class RankError(GivaError, ValueError):
    """Requested rank is outside the admissible range."""


class DegeneracyError(GivaError, ValueError):
    """Input is (numerically) rank deficient or identically zero."""


class NumericalError(GivaError, ArithmeticError):
    """A non-finite value was produced or supplied."""


class ContractError(GivaError, RuntimeError):
    """A call violated a stateful precondition (stale cache, mismatched provenance)."""


class DataError(GivaError, ValueError):
    """A data source is empty or malformed."""


class ParseError(DataError):
    """A file could not be parsed; carries the offending line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DivergenceError(GivaError, ArithmeticError):
    """Training loss blew up."""

    def __init__(self, message, step):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConfigError(GivaError, ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class IntegrityError(GivaError, IOError):
    """A checkpoint failed validation (bad magic, truncated, hash mismatch)."""
