"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto process exit codes: ConfigError -> 2,
InputError -> 3, NumericalError -> 4.
"""


class PacsepError(Exception):
    """Base class for all pacsep errors."""

    code = "error"


class ConfigError(PacsepError):
    """Invalid or inconsistent configuration."""

    code = "bad-config"


class InputError(PacsepError):
    """Missing, unreadable, or corrupt input artifact."""

    code = "missing-input"


class NumericalError(PacsepError):
    """Non-finite values or a numerically unrecoverable state."""

    code = "numerical-failure"
