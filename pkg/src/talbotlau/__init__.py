"""Talbot-Lau interferometry of metal clusters with photodepletion gratings.

Prediction of quantum and classical fringe signals, synthetic raw data,
fringe/TOF analysis and Bayesian macroscopicity assessment.
"""
__version__ = "0.1.0"

from .constants import CODATA2018, PhysicalConstants
from .physics import (
    ClusterMaterial,
    ClusterSpecies,
    DegenerateSignalError,
    DomainError,
    GratingInteraction,
    GratingSettings,
    InterferometerSetup,
    de_broglie_wavelength,
    default_setup,
    fourier_signal,
    grating_interaction,
    ionization_threshold,
    sodium_cluster,
    talbot_lau_coefficient,
    talbot_lau_coefficient_classical,
    talbot_length,
    visibility_from_coefficients,
)
from .ensemble import (
    BeamEnsemble,
    PredictionResult,
    averaged_signal,
    default_ensemble,
    predict,
    transmission_vs_power,
    visibility_map,
    visibility_vs_power,
)
from .records import FringeScanRecord, TofTrace
from .macroscopicity import (
    MacroModel,
    MacroPosterior,
    MmmParams,
    bayesian_update,
    gaussian_posterior_check,
    mmm_reduction_factor,
    modified_signal,
    scan_log_likelihood,
)
from .synth import synth_fringe_scan, synth_power_scan, synth_tof_trace
from .analysis import FringeFit, VelocityEstimate, denoise_tof, fit_fringe, fit_velocity

__all__ = [name for name in dir() if not name.startswith("_")]
