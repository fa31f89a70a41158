"""Exception types raised by the numerical routines."""


class HierRGError(Exception):
    """Base class for all package errors."""


class NumericalFailure(HierRGError):
    """A computation produced non-finite values or otherwise broke down."""

    def __init__(self, operation, message):
        super().__init__(f"{operation}: {message}")
        self.operation = operation


class UnsupportedBackend(HierRGError):
    pass


class DegenerateInput(HierRGError):
    pass


class ConvergenceError(NumericalFailure):
    """Iterative solver gave up. ``trace`` holds whatever history is useful."""

    def __init__(self, operation, message, trace=None):
        super().__init__(operation, message)
        self.trace = trace if trace is not None else []


class NoBracketError(NumericalFailure):
    pass


class InconclusiveError(NumericalFailure):
    def __init__(self, operation, message, trajectory=None):
        super().__init__(operation, message)
        self.trajectory = trajectory


class InvalidFixedPoint(HierRGError):
    pass


class MemoryGuardError(HierRGError):
    pass


class TuningFailure(NumericalFailure):
    pass


class CalibrationError(NumericalFailure):
    pass


class NonSummableError(NumericalFailure):
    pass


class ConfigError(HierRGError):
    pass
