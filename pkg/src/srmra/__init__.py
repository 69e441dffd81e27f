"""Super-resolution multi-reference alignment: simulation and denoiser-projected recovery."""

from .denoise import DenoiseSchedule, DenoiserError, DenoiserHandle, denoise, schedule_next
from .em_solver import EmSolverConfig, projected_em
from .estimate import Estimate, random_initialization
from .harness import ExperimentConfig, RunRecord, emit_csv, run_experiment
from .metrics import ErrorReport, shift_aligned_error, snr
from .model import ModelParams, ObservationSet, ShiftDistribution, sample_observations
from .moments import MomentPair, analytic_moments, empirical_moments, ls_objective
from .mom_solver import MomSolverConfig, projected_mom
from .phantoms import builtin_phantom

__version__ = "0.1.0"

__all__ = [
    "DenoiseSchedule", "DenoiserError", "DenoiserHandle", "EmSolverConfig", "ErrorReport",
    "Estimate", "ExperimentConfig", "ModelParams", "MomSolverConfig", "MomentPair",
    "ObservationSet", "RunRecord", "ShiftDistribution", "analytic_moments", "builtin_phantom",
    "denoise", "emit_csv", "empirical_moments", "ls_objective", "projected_em", "projected_mom",
    "random_initialization", "run_experiment", "sample_observations", "schedule_next",
    "shift_aligned_error", "snr",
]
