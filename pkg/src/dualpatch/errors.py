"""Exception hierarchy shared by all modules."""


class DualPatchError(Exception):
    """Base class for every error raised by this package."""


class ParameterDomainError(DualPatchError, ValueError):
    """A physical or configuration parameter lies outside its valid domain."""


class ShapeError(DualPatchError, ValueError):
    pass


class TrainingDivergenceError(DualPatchError, ArithmeticError):
    """Raised when a loss becomes non-finite during optimisation."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class TrainingFailure(DualPatchError, RuntimeError):
    """A training run finished without meeting its quality target."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class FormatError(DualPatchError, ValueError):
    """A serialized artifact (adapter, patch, frame) has an unexpected layout."""


class PairingError(DualPatchError, FileNotFoundError):
    pass


class LabelParseError(DualPatchError, ValueError):
    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line


class CapabilityError(DualPatchError, TypeError):
    """A detector handle lacks the capability an operation needs."""


class ProtocolError(DualPatchError, IOError):
    pass


class RegistrationError(DualPatchError, RuntimeError):
    pass


class UndefinedASRError(DualPatchError, ZeroDivisionError):
    pass
