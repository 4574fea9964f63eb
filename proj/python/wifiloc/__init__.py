"""Crowdsourced WiFi localization with odometry fusion."""

from ._wifiloc import (
    Error,
    Localizer,
    ParseError,
    PriorMap,
    RadioMap,
    ValidationError,
    Wknn,
    __version__,
    build_prior,
    metrics,
    run_experiment,
    run_filter,
    simulate,
    uncertainty_loss,
)

__all__ = [
    "Error",
    "Localizer",
    "ParseError",
    "PriorMap",
    "RadioMap",
    "ValidationError",
    "Wknn",
    "__version__",
    "build_prior",
    "metrics",
    "run_experiment",
    "run_filter",
    "simulate",
    "uncertainty_loss",
]
