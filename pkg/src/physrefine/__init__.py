"""Physics-consistent refinement of articulated motion with force-variance maps."""
from .diffusion import ShiftSchedule, build_schedule, refine
from .dynamics import RigidBodySet, inverse_dynamics, mass_matrix, pseudoforce, residual_metric
from .kinematics import KinematicTree, Trajectory, joint_positions
from .denoiser import LaplacePosterior, MLPDenoiser, fit_laplace
from .training import CorruptionConfig, Normalizer, TrainConfig, synth_dataset, train
from .uncertainty import VarianceReport, propagate

__all__ = [
    "CorruptionConfig", "KinematicTree", "LaplacePosterior", "MLPDenoiser", "Normalizer", "RigidBodySet",
    "ShiftSchedule", "TrainConfig", "Trajectory", "VarianceReport", "build_schedule", "fit_laplace",
    "inverse_dynamics", "joint_positions", "mass_matrix", "propagate", "pseudoforce", "refine",
    "residual_metric", "synth_dataset", "train",
]
__version__ = "0.1.0"
