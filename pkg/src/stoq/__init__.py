"""Stochastic pair-trajectory simulation of systems coupled to Gaussian thermal baths."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    BathSpec,
    ModelError,
    Scenario,
    SpectralModel,
    TimeGrid,
    build_channel_scenario,
    build_two_level_scenario,
    discrete_spectrum,
    ohmic_spectrum,
    validate_model,
)
from .bathcorr import correlation_matrix, correlations_for_grid, fdt_diagnostics  # noqa: E402
from .noisegen import noise_factor, sample_noise  # noqa: E402
from .dynamics import propagate_pair  # noqa: E402
from .ensemble import EnsembleResult, run_ensemble  # noqa: E402

__all__ = [
    "BathSpec", "ModelError", "Scenario", "SpectralModel", "TimeGrid",
    "build_channel_scenario", "build_two_level_scenario", "discrete_spectrum", "ohmic_spectrum",
    "validate_model", "correlation_matrix", "correlations_for_grid", "fdt_diagnostics",
    "noise_factor", "sample_noise", "propagate_pair", "EnsembleResult", "run_ensemble",
]
