class MobprofError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(MobprofError, ValueError):
    pass


class DataError(MobprofError):
    """Input data is missing, unreadable or contains no usable rows."""


class LookupFailure(MobprofError, KeyError):
    pass


class NumericalError(MobprofError, FloatingPointError):
    """A loss or state became non-finite. Carries a diagnostic dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
