"""Weak-perspective projection and sketch-style limb-length perturbation.

The camera is orthographic projection followed by a uniform pixel scale and
translation; depth only matters for occlusion ordering (smaller z is nearer
the viewer).  Image coordinates follow the usual raster convention: origin
top-left, y down, so world +y (up) maps to -v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import (
    NUM_BONES,
    NUM_JOINTS,
    Pose3D,
    SkeletonTopology,
    ValidationError,
)

# Input image frame used throughout the dataset: 256 rows by 192 columns.
FRAME_HEIGHT = 256
FRAME_WIDTH = 192

# Bones shorter than this in 2D carry no usable direction information.
MIN_BONE_2D = 1e-6


@dataclass
class Camera:
    """Weak-perspective camera: pixels-per-meter scale plus pixel translation."""

    scale: float
    tx: float
    ty: float

    def copy(self) -> "Camera":
        return Camera(self.scale, self.tx, self.ty)

    def validate(self) -> None:
        vals = (self.scale, self.tx, self.ty)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("camera parameters must be finite")
        if self.scale <= 0.0:
            raise ValidationError("camera scale must be positive")


@dataclass
class Pose2D:
    """Image-frame joint positions in pixels, shape (16, 2)."""

    joints: np.ndarray


@dataclass
class PerturbationSpec:
    """Uniform limb-length bias configuration.

    ``bias_range`` is the half-width a of the Uniform(-a, a) multiplicative
    length bias; it must satisfy 0 <= a < 1 so perturbed lengths stay positive.
    """

    bias_range: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.bias_range < 1.0):
            raise ValidationError("bias_range must lie in [0, 1)")


@dataclass
class PerturbRecord:
    """Applied per-bone biases, 15 values with |delta_i| <= bias_range."""

    deltas: np.ndarray


def project(pose3d: Pose3D, camera: Camera) -> Pose2D:
    """Project 3D joints to pixels: (u, v) = (s*x + tx, s*(-y) + ty).

    Depth is discarded, so the projection is invariant to z and exactly
    equivariant to camera translation.
    """
    camera.validate()
    j = pose3d.joints
    u = camera.scale * j[:, 0] + camera.tx
    v = camera.scale * (-j[:, 1]) + camera.ty
    return Pose2D(np.stack([u, v], axis=1))


def perturb_projection(
    pose2d: Pose2D, topology: SkeletonTopology, spec: PerturbationSpec
) -> tuple[Pose2D, PerturbRecord]:
    """Rescale every projected bone length by 1 + delta, keeping the skeleton connected.

    Bones are visited root-to-leaf; each bone's 2D vector is stretched along
    its own direction by a bias drawn from Uniform(-a, a), and the child's
    whole subtree is translated by the child displacement so downstream bone
    vectors are preserved until their own turn.  Bones shorter than
    ``MIN_BONE_2D`` pixels are skipped and their recorded bias is zero.
    Deterministic given ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # Draw all biases up front so the random stream is independent of geometry.
    deltas = rng.uniform(-spec.bias_range, spec.bias_range, size=NUM_BONES)
    return apply_perturb_record(pose2d, topology, PerturbRecord(deltas))


def apply_perturb_record(
    pose2d: Pose2D, topology: SkeletonTopology, record: PerturbRecord
) -> tuple[Pose2D, PerturbRecord]:
    """Apply recorded per-bone biases; returns the result and the effective record.

    Re-applying a record reproduces the original perturbed pose.  Biases for
    degenerate bones are recorded as zero.
    """
    joints = pose2d.joints.astype(float).copy()
    applied = np.zeros(NUM_BONES)
    descendants = topology.bone_descendant_joints()
    for i, (p, c) in enumerate(topology.bones):
        b = joints[c] - joints[p]
        length = float(np.hypot(b[0], b[1]))
        if length < MIN_BONE_2D:
            continue
        delta = float(record.deltas[i])
        shift = delta * b
        joints[list(descendants[i])] += shift
        applied[i] = delta
    return Pose2D(joints), PerturbRecord(applied)


def foreshortening_ratio(
    b3d: np.ndarray, b2d: np.ndarray, camera: Camera, mode: str = "cosine"
) -> float:
    """Per-bone foreshortening ratio relating a 3D bone to its projection.

    mode "cosine": |b2d| / (scale * |b3d|), clamped to [0, 1].  Equals the
    cosine of the bone-to-image-plane angle when b2d is the projection of
    b3d under ``camera``; 1 means in-plane, 0 means along the view axis.

    mode "as-written": scale * |b3d| / max(|b2d|, 1e-6 px), the reciprocal
    convention; unbounded as the bone approaches the view axis.
    """
    n3 = float(np.linalg.norm(b3d))
    if n3 <= 0.0:
        raise ValidationError("foreshortening ratio needs a non-degenerate 3D bone")
    n2 = float(np.linalg.norm(b2d))
    if mode == "cosine":
        return float(np.clip(n2 / (camera.scale * n3), 0.0, 1.0))
    if mode == "as-written":
        return camera.scale * n3 / max(n2, MIN_BONE_2D)
    raise ValidationError(f"unknown foreshortening mode: {mode!r}")
