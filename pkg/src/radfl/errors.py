"""Exception types raised across the package."""


class RadflError(Exception):
    """Base class for all package errors."""


class DomainError(RadflError, ValueError):
    pass


class InvalidDensity(RadflError, ValueError):
    pass


class ConnectivityFailure(RadflError):
    pass


class Unreachable(RadflError):
    pass


class SizeLimit(RadflError, ValueError):
    pass


class NonFiniteGradient(RadflError, FloatingPointError):
    pass


class UnsupportedTask(RadflError, TypeError):
    pass


class ConfigError(RadflError, ValueError):
    """Raised for invalid experiment configurations.

    ``diagnostics`` holds one ``"<file>:<line>: <message>"`` string per problem.
    """

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


class SizeWarning(UserWarning):
    pass
