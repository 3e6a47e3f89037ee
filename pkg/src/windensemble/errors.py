"""Exception types shared across the package."""


class WindEnsembleError(Exception):
    """Base class for all package errors."""


class DimensionError(WindEnsembleError, ValueError):
    """Raised when two array dimensions that must agree do not.

    Attributes
    ----------
    expected, got : int
        The dimension the operation required and the one it received.
    """

    def __init__(self, what, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected dimension {expected}, got {got}")


class SequenceTooShortError(WindEnsembleError, ValueError):
    """Raised when a series is shorter than an operation's minimum length."""

    def __init__(self, what, required, got):
        self.what = what
        self.required = required
        self.got = got
        super().__init__(f"{what}: need length >= {required}, got {got}")


class DataFormatError(WindEnsembleError, ValueError):
    """Raised for malformed input files; carries the offending line when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f" line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(WindEnsembleError, ValueError):
    """Raised when a run configuration fails validation; names the field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
