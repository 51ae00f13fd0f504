"""Exception types raised across the package."""


class RcaError(Exception):
    """Base class for every error raised by crossrca."""


class SchemaError(RcaError, ValueError):
    """A key, value label or metric name violates the declared schema."""


class EmptyInputError(RcaError, ValueError):
    pass


class IncompletePanelError(RcaError, ValueError):
    pass


class FormulaError(RcaError, ValueError):
    pass


class FormulaSyntaxError(FormulaError):
    def __init__(self, message, position):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnboundNameError(FormulaError):
    def __init__(self, name):
        super().__init__(f"unbound name {name!r}")
        self.name = name


class FormulaDomainError(FormulaError):
    """Division by zero, log/sqrt outside the domain, or a non-finite result."""


class IngestError(RcaError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class DuplicateRowError(IngestError):
    pass


class InsufficientHistoryError(RcaError, ValueError):
    pass


class DivergenceError(RcaError, ArithmeticError):
    def __init__(self, epoch, learning_rate):
        super().__init__(
            f"training diverged at epoch {epoch} (learning rate {learning_rate:g})"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


class NoAnomalyError(RcaError, ValueError):
    """The monitored root metric does not deviate from its expected value."""


class NoCandidateError(RcaError, ValueError):
    def __init__(self, message="no localizable cause"):
        super().__init__(message)


class SynthesisError(RcaError, ValueError):
    pass
