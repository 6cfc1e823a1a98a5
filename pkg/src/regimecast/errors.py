"""Error types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2,
numerical failures exit 1.
"""


class InvalidArgumentError(ValueError):
    """An operation received an argument outside its documented domain."""


class InvalidConfigError(ValueError):
    """A config file or config object fails validation."""


class UnsupportedConfigError(InvalidConfigError):
    """A config combination that is recognised but deliberately not supported."""


class NumericalError(RuntimeError):
    """A numerical routine failed beyond recovery (e.g. jitter ladder exhausted)."""

    def __init__(self, message: str, jitter: float | None = None):
        super().__init__(message)
        self.jitter = jitter
