"""Exception hierarchy shared across the package."""


class StratifyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StratifyError, ValueError):
    """Invalid configuration, shapes or argument combinations."""


class NumericError(StratifyError, FloatingPointError):
    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class DegenerateBatchError(StratifyError, ValueError):
    """Batch too small to compute normalization statistics."""


class ProtocolOrderError(StratifyError, RuntimeError):
    """A protocol step was invoked before its prerequisite."""


class PartitionError(StratifyError, ValueError):
    pass


class PlanError(StratifyError, ValueError):
    pass


class UnservablePlaceholderError(StratifyError, LookupError):
    def __init__(self, placeholder):
        super().__init__(f"no available client for placeholder {placeholder!r}")
        self.placeholder = placeholder


class FormatError(StratifyError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolIntegrityError(StratifyError, RuntimeError):
    pass


class BackendPrecisionError(StratifyError, ArithmeticError):
    pass
