"""Exception hierarchy."""


class TilqError(Exception):
    pass


class ConfigError(TilqError, ValueError):
    pass


class DimensionError(TilqError, ValueError):
    pass


class DomainError(TilqError, ValueError):
    pass


class ValidationError(TilqError, ValueError):
    """Raised with the list of violations when a model fails validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IntegrationError(TilqError, ArithmeticError):
    def __init__(self, message, time=None):
        self.time = time
        super().__init__(message)


class SingularGainError(IntegrationError):
    pass


class BlowupError(IntegrationError):
    pass


class PositivityError(IntegrationError):
    pass


class SimulationError(TilqError, ArithmeticError):
    def __init__(self, message, path=None, knot=None):
        self.path = path
        self.knot = knot
        super().__init__(message)
