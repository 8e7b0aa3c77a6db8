"""Dynamic tomography of moving, rotating Gaussian particles.

Two sequential stages recover a scene from a single-source sinogram:
trajectories from the sinogram's modes, then angular velocities,
attenuations and shapes from the full projections.
"""

from .geometry import AcquisitionGeometry, Projectile, dimension_criterion, benchmark_geometry
from .model import ParticleParams, Scene, Sinogram, simulate_sinogram, xray_gaussian
from .modes import ModeSet, PeakConfig, detect_modes, mode_map
from .stage1 import Stage1Config, Stage1Error, TrajectoryEstimate, optimize_trajectories
from .stage2 import MorphologyEstimate, Stage2Config, Stage2Error, optimize_morphology

__version__ = "0.1.0"

__all__ = [
    "AcquisitionGeometry", "Projectile", "dimension_criterion", "benchmark_geometry",
    "ParticleParams", "Scene", "Sinogram", "simulate_sinogram", "xray_gaussian",
    "ModeSet", "PeakConfig", "detect_modes", "mode_map",
    "Stage1Config", "Stage1Error", "TrajectoryEstimate", "optimize_trajectories",
    "MorphologyEstimate", "Stage2Config", "Stage2Error", "optimize_morphology",
]
