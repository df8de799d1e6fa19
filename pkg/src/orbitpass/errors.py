"""Exception types shared across the package."""


class OrbitPassError(Exception):
    """Base class for all package errors."""


class GeometryError(OrbitPassError):
    """Invalid metric/potential configuration (non-SPD metric, bad chart, ...)."""


class ExpressionError(OrbitPassError):
    """Rejected or malformed arithmetic expression."""


class ConfigError(OrbitPassError):
    """Run-config parse or validation failure.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class LinkingError(OrbitPassError):
    """Linking-endpoint construction failed (bad seeds, path collapse, ...)."""


class SolverError(OrbitPassError):
    """Pipeline failure, labelled with the stage that raised it."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
