"""Exception types shared across the package."""


class QPDualError(Exception):
    pass


class RationalInputError(QPDualError):
    """Raised when an input that must be irrational is rational to working precision."""

    def __init__(self, message, denominator=None):
        super().__init__(message)
        self.denominator = denominator


class ResolutionError(QPDualError):
    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class NotEllipticError(QPDualError):
    pass


class HomotopyError(QPDualError):
    pass


class ResonanceError(QPDualError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConvergenceError(QPDualError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class SizeGuardError(QPDualError):
    pass


class ConfigError(QPDualError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
