"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class FieldRegError(Exception):
    pass


class InvalidArgument(FieldRegError, ValueError):
    pass


class ConfigError(FieldRegError):
    pass


class InvalidState(FieldRegError, RuntimeError):
    pass


class FormatError(FieldRegError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ShapeMismatch(FormatError):
    pass


class CheckpointMismatch(FormatError):
    pass


class NumericalFailure(FieldRegError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotPositiveDefinite(NumericalFailure):
    def __init__(self, index, pivot):
        super().__init__(f"matrix is not positive definite: pivot {pivot!r} at index {index}")
        self.index = index
        self.pivot = pivot


class InsufficientSamples(FieldRegError, ValueError):
    pass


class DegenerateData(FieldRegError, ValueError):
    pass
