"""Sketch-style 2D-to-3D human pose toolkit on a 16-joint stick skeleton.

Submodules:
    skeleton    fixed topology, axis-angle math, forward kinematics
    projection  weak-perspective camera and limb-length perturbation
    heatmap     Gaussian joint heatmaps and binary blobs
    synth       synthetic dataset generation and JSONL I/O
    losses      weighted geometric objective with analytic gradients
    fitter      iterative optimization baseline
    regressor   feed-forward MLP trained on synthesized data
    metrics     MPJPE / PA-MPJPE and runtime benchmarking
    cli         command-line entry point
"""

from .skeleton import (
    BoneScales,
    Pose3D,
    PoseParams,
    SkeletonTopology,
    canonical_topology,
    forward_kinematics,
)
from .projection import Camera, PerturbationSpec, Pose2D, perturb_projection, project
from .losses import FitTargets, LossBreakdown, LossWeights, total_loss
from .metrics import mpjpe, pa_mpjpe, procrustes_align

__version__ = "0.1.0"

__all__ = [
    "BoneScales",
    "Camera",
    "FitTargets",
    "LossBreakdown",
    "LossWeights",
    "PerturbationSpec",
    "Pose2D",
    "Pose3D",
    "PoseParams",
    "SkeletonTopology",
    "canonical_topology",
    "forward_kinematics",
    "mpjpe",
    "pa_mpjpe",
    "perturb_projection",
    "procrustes_align",
    "project",
    "total_loss",
    "__version__",
]
