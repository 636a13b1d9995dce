"""Error taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError and DataError are usage
problems (exit 2), BlowupError is a numerical failure of an otherwise
valid run (exit 1).
"""


class IgbError(Exception):
    """Base class for all package errors."""


class ConfigError(IgbError):
    """Invalid configuration value or malformed config file."""


class DataError(IgbError):
    """Invalid dataset content (shape, range, or encoding)."""


class LabelError(DataError):
    """Labels incompatible with the requested loss."""


class ConvergenceError(IgbError):
    """An iterative solver exhausted its iteration budget."""


class BlowupError(IgbError):
    """Non-finite value produced while integrating a flow.

    Carries the time at which integration became invalid; NaN when the
    failure happened outside a timed integration.
    """

    def __init__(self, message: str, t: float = float("nan")):
        text = message if t != t else f"{message} (at t={t:.6g})"
        super().__init__(text)
        self.t = t
