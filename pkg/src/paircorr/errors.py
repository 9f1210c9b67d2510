"""Exception types raised by the paircorr package."""


class PairCorrError(Exception):
    """Base class for all package errors."""


class DomainError(PairCorrError, ValueError):
    """An input lies outside the domain of the model."""


class UndefinedVisibilityError(DomainError):
    """Visibility requested for a cell whose peak and background are both zero."""


class BracketError(PairCorrError, ValueError):
    """The visibility is not unimodal on the requested bracket."""


class EmptyAccumulatorError(PairCorrError, ValueError):
    """A correlation estimate was requested from an accumulator with no coincidences."""
