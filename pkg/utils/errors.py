from typing import Optional


class CtdError(Exception):
    """Base class for every error raised by the pricer"""


class InputError(CtdError):
    """Invalid model input (parameters, correlations, settings)"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class DomainError(CtdError):
    """Argument outside the domain of a model function"""


class DegenerateVarianceError(CtdError):
    pass


class InsufficientDomainError(CtdError):
    """A quadrature or convolution grid does not carry enough probability mass"""


class ConsistencyError(CtdError):
    """Computed moments violate an internal identity beyond tolerance"""


class UnsupportedError(CtdError):
    pass


class ConfigError(CtdError):
    """Rejected run configuration, located by file, line and key"""

    def __init__(self, message: str, path: str = "<config>", line: Optional[int] = None, key: Optional[str] = None):
        self.path = path
        self.line = line
        self.key = key
        self.reason = message
        location = f"{path}:{line}" if line is not None else path
        prefix = f"{location}: {key}: " if key else f"{location}: "
        super().__init__(prefix + message)


class DegenerateSpreadWarning(UserWarning):
    """A converted spread has zero volatility"""


# Exit status per error family (CLI contract)
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def exit_status_for(error: Exception) -> int:
    if isinstance(error, (ConfigError, InputError, OSError)):
        return EXIT_CONFIG
    return EXIT_NUMERICAL
