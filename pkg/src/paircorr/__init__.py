"""Correlation and visibility of photon pairs seen by noisy, non-resolving detector arrays."""

__version__ = "0.1.0"

from .analytic import (
    CorrelationResult,
    VisibilityCurve,
    background_g2,
    diagonal_reduce,
    g2_exact,
    g2_quadratic,
    mean_events_per_frame,
    optimal_mu_approx,
    optimal_mu_exact,
    visibility,
    visibility_curve,
    visibility_exact,
    visibility_quadratic,
)
from .errors import (
    BracketError,
    DomainError,
    EmptyAccumulatorError,
    PairCorrError,
    UndefinedVisibilityError,
)
from .model import (
    DetectorModel,
    JointDistribution,
    OccupationProbabilities,
    SourceModel,
    mean_events_per_pixel,
    occupation,
    poisson_average,
    populated_modes,
)

__all__ = [
    "BracketError",
    "CorrelationResult",
    "DetectorModel",
    "DomainError",
    "EmptyAccumulatorError",
    "JointDistribution",
    "OccupationProbabilities",
    "PairCorrError",
    "SourceModel",
    "UndefinedVisibilityError",
    "VisibilityCurve",
    "background_g2",
    "diagonal_reduce",
    "g2_exact",
    "g2_quadratic",
    "mean_events_per_frame",
    "mean_events_per_pixel",
    "occupation",
    "optimal_mu_approx",
    "optimal_mu_exact",
    "poisson_average",
    "populated_modes",
    "visibility",
    "visibility_curve",
    "visibility_exact",
    "visibility_quadratic",
]
