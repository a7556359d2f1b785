"""Exception taxonomy shared across the package."""


class MoelabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MoelabError, ValueError):
    """Invalid configuration value or violated configuration invariant.

    `key` names the offending config key when one can be identified, so the
    parser can report a line number.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ConfigParseError(ConfigError):
    """Config document failed to parse; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DataError(MoelabError, ValueError):
    """Corpus, shard, batch, or file-format problem."""


class RoutingError(MoelabError, ValueError):
    """Routing decision could not be made (missing label, missing router)."""


class NumericError(MoelabError, ArithmeticError):
    """Non-finite values where finite ones are required (inputs, losses, grads)."""
