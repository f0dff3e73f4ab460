"""Exception hierarchy shared by every module."""


class OtAlignError(Exception):
    """Base class for all errors raised by otalign."""


class RejectedInputError(OtAlignError, ValueError):
    """An argument violates a precondition (shape, range, length)."""


class NumericalError(OtAlignError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class LabelParseError(RejectedInputError):
    """A ``disease: state`` line could not be parsed.

    ``token`` holds the offending piece of text.
    """

    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token


class SolverError(OtAlignError, RuntimeError):
    """The Sinkhorn solver cannot proceed (e.g. kernel underflow)."""


class TrainingError(OtAlignError, RuntimeError):
    """A training loop diverged. ``epoch`` is the epoch where it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
