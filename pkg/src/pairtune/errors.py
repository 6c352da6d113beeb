"""Exception types, mapped one-to-one onto the CLI's exit codes."""


class PairtuneError(Exception):
    """Base class for every error this package raises deliberately."""

    exit_code = 1


class ConfigurationError(PairtuneError):
    """Invalid configuration values, incompatible shapes, or bad arguments."""

    exit_code = 2


class ConfigValidationError(ConfigurationError):
    """Aggregated config-file violations; ``errors`` lists one message per field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NumericError(PairtuneError):
    """Non-finite values or a numerical procedure that failed its tolerance."""

    exit_code = 3


class IOFailure(PairtuneError):
    """Missing, unreadable, or unwritable files."""

    exit_code = 4
