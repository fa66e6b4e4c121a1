"""Synthetic sketch-pose dataset generation.

Pipeline per sample: draw a limits-bounded random pose, scales, and camera;
run forward kinematics; project; perturb projected limb lengths; label
joint visibility from bone-capsule occlusion; compute the bounding box; and
package everything as one annotation tuple.  Samples are fully determined
by (config, base_seed, index), so generation is order-independent.

Dataset files are JSON Lines, one sample per line, with an optional binary
heatmap sidecar.  Units: meters, pixels, radians.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from .heatmap import DEFAULT_SIGMA, Heatmap, encode_heatmap
from .projection import (
    FRAME_HEIGHT,
    FRAME_WIDTH,
    Camera,
    PerturbRecord,
    PerturbationSpec,
    Pose2D,
    perturb_projection,
    project,
)
from .skeleton import (
    HEAD,
    L_ANKLE,
    L_ELBOW,
    L_HIP,
    L_KNEE,
    L_SHOULDER,
    NECK,
    NUM_BONES,
    NUM_JOINTS,
    R_ANKLE,
    R_ELBOW,
    R_HIP,
    R_KNEE,
    R_SHOULDER,
    TORSO_BONES,
    BoneScales,
    Pose3D,
    PoseParams,
    SkeletonTopology,
    ValidationError,
    canonical_topology,
    forward_kinematics,
)

# Offset mixed into per-sample seeds to decorrelate the perturbation stream
# from the pose-sampling stream.
_PERTURB_SEED_SALT = 0x9E3779B9


class JointLabel(Enum):
    VISIBLE = "visible"
    INVISIBLE = "invisible"
    NOT_INCLUDED = "not-included"


class DataFormatError(ValueError):
    """Malformed dataset line; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def default_joint_limits() -> np.ndarray:
    """Per-joint per-axis rotation bounds in radians, shape (16, 3, 2).

    Rough anatomical boxes around the rest pose (arms hanging, legs
    straight): x swings limbs in the sagittal plane, y twists, z moves them
    laterally.  Leaf joints (head, wrists, toes) articulate nothing in this
    skeleton, so their ranges collapse to zero.
    """
    lim = np.zeros((NUM_JOINTS, 3, 2))
    lim[NECK] = [(-0.40, 0.40), (-0.60, 0.60), (-0.35, 0.35)]
    lim[L_SHOULDER] = [(-1.50, 1.50), (-0.80, 0.80), (-0.40, 2.40)]
    lim[R_SHOULDER] = [(-1.50, 1.50), (-0.80, 0.80), (-2.40, 0.40)]
    lim[L_ELBOW] = [(0.00, 2.40), (-0.60, 0.60), (0.0, 0.0)]
    lim[R_ELBOW] = [(0.00, 2.40), (-0.60, 0.60), (0.0, 0.0)]
    lim[L_HIP] = [(-0.50, 1.80), (-0.60, 0.60), (-0.20, 0.80)]
    lim[R_HIP] = [(-0.50, 1.80), (-0.60, 0.60), (-0.80, 0.20)]
    lim[L_KNEE] = [(-2.40, 0.00), (-0.30, 0.30), (0.0, 0.0)]
    lim[R_KNEE] = [(-2.40, 0.00), (-0.30, 0.30), (0.0, 0.0)]
    lim[L_ANKLE] = [(-0.60, 0.60), (-0.30, 0.30), (-0.25, 0.25)]
    lim[R_ANKLE] = [(-0.60, 0.60), (-0.30, 0.30), (-0.25, 0.25)]
    return lim


def default_root_limits() -> np.ndarray:
    """Root orientation bounds: wide yaw, modest pitch and roll."""
    return np.array([(-0.50, 0.50), (-2.80, 2.80), (-0.40, 0.40)])


def default_occlusion_radii() -> np.ndarray:
    """Capsule radius per bone in meters: 0.05 for limbs, 0.09 for the torso bones."""
    radii = np.full(NUM_BONES, 0.05)
    radii[list(TORSO_BONES)] = 0.09
    return radii


@dataclass
class SamplerConfig:
    """Everything the synthetic generator needs besides the seed."""

    joint_limits: np.ndarray = field(default_factory=default_joint_limits)
    root_limits: np.ndarray = field(default_factory=default_root_limits)
    scale_jitter: float = 0.15
    camera_scale_range: tuple[float, float] = (50.0, 75.0)
    camera_center_jitter: float = 15.0
    bias_range: float = 0.25
    occlusion_radii: np.ndarray = field(default_factory=default_occlusion_radii)
    bbox_margin: float = 0.10
    count: int = 1000
    frame: tuple[int, int] = (FRAME_WIDTH, FRAME_HEIGHT)

    def validate(self) -> None:
        if self.joint_limits.shape != (NUM_JOINTS, 3, 2):
            raise ValidationError("joint_limits must have shape (16, 3, 2)")
        if np.any(self.joint_limits[..., 0] > self.joint_limits[..., 1]):
            raise ValidationError("joint limits must satisfy min <= max")
        if np.any(self.root_limits[:, 0] > self.root_limits[:, 1]):
            raise ValidationError("root limits must satisfy min <= max")
        if not (0.0 <= self.scale_jitter < 0.8):
            raise ValidationError("scale_jitter must lie in [0, 0.8)")
        lo, hi = self.camera_scale_range
        if not (0.0 < lo <= hi):
            raise ValidationError("camera scale range must be positive and ordered")
        if not (0.0 <= self.bias_range < 1.0):
            raise ValidationError("bias_range must lie in [0, 1)")
        if np.any(self.occlusion_radii <= 0.0):
            raise ValidationError("occlusion radii must be positive")
        if self.count < 1:
            raise ValidationError("count must be at least 1")


@dataclass
class DatasetSample:
    """One synthesized annotation tuple."""

    id: int
    joints2d_clean: Pose2D
    joints2d_perturbed: Pose2D
    joints3d: Pose3D
    pose_params: PoseParams
    bone_scales: BoneScales
    camera: Camera
    labels: list[JointLabel]
    bbox: tuple[float, float, float, float]
    perturb: PerturbRecord
    seed: int

    def included_mask(self) -> np.ndarray:
        return np.array([lab is not JointLabel.NOT_INCLUDED for lab in self.labels])


def sample_pose(
    config: SamplerConfig, seed: int
) -> tuple[PoseParams, BoneScales, Camera]:
    """Draw one pose/scales/camera triple, deterministic per seed.

    Rotations are uniform inside the per-joint limit boxes; bone scales are
    uniform in 1 +- scale_jitter with the two torso bones tied to one value
    (they share the physical spine link); the camera scale is uniform in its
    range and the translation jitters around the frame center, with the root
    at the world origin.
    """
    config.validate()
    rng = np.random.default_rng(seed)

    root = rng.uniform(config.root_limits[:, 0], config.root_limits[:, 1])
    rotations = rng.uniform(
        config.joint_limits[..., 0], config.joint_limits[..., 1]
    )
    scales = rng.uniform(
        1.0 - config.scale_jitter, 1.0 + config.scale_jitter, size=NUM_BONES
    )
    scales[TORSO_BONES[1]] = scales[TORSO_BONES[0]]

    lo, hi = config.camera_scale_range
    cam_scale = float(rng.uniform(lo, hi))
    j = config.camera_center_jitter
    w, h = config.frame
    tx = w / 2.0 + float(rng.uniform(-j, j))
    ty = h / 2.0 + float(rng.uniform(-j, j))

    pose = PoseParams(
        root_orientation=root,
        joint_rotations=rotations,
        root_position=np.zeros(3),
    )
    return pose, BoneScales(scales), Camera(cam_scale, tx, ty)


def label_occlusion(
    pose3d: Pose3D,
    camera: Camera,
    radii: np.ndarray,
    topology: SkeletonTopology | None = None,
    frame: tuple[int, int] = (FRAME_WIDTH, FRAME_HEIGHT),
) -> list[JointLabel]:
    """Visibility labels from bone-capsule occlusion.

    A joint is invisible when its projection falls inside the projected
    silhouette of a capsule around some non-incident bone whose axis, at the
    closest point in the image, is nearer the camera (smaller z) by more
    than the capsule radius.  Joints projecting outside the frame are
    not-included, which takes precedence over occlusion.
    """
    topology = topology or canonical_topology()
    if np.any(np.asarray(radii) <= 0.0):
        raise ValidationError("occlusion radii must be positive")
    joints2 = project(pose3d, camera).joints
    joints3 = pose3d.joints
    bp, bc = topology.bone_arrays()
    w, h = frame

    seg_a2 = joints2[bp]
    seg_d2 = joints2[bc] - seg_a2
    seg_len2 = np.sum(seg_d2 * seg_d2, axis=1)
    z_a = joints3[bp][:, 2]
    z_b = joints3[bc][:, 2]
    radii_px = camera.scale * np.asarray(radii)

    labels: list[JointLabel] = []
    for j in range(NUM_JOINTS):
        u, v = joints2[j]
        if not (0.0 <= u < w and 0.0 <= v < h):
            labels.append(JointLabel.NOT_INCLUDED)
            continue
        rel = joints2[j] - seg_a2
        t = np.divide(
            np.sum(rel * seg_d2, axis=1),
            seg_len2,
            out=np.zeros(NUM_BONES),
            where=seg_len2 > 0.0,
        )
        t = np.clip(t, 0.0, 1.0)
        closest = seg_a2 + t[:, None] * seg_d2
        dist = np.linalg.norm(joints2[j] - closest, axis=1)
        z_axis = z_a + t * (z_b - z_a)
        occluding = (
            (bp != j)
            & (bc != j)
            & (dist <= radii_px)
            & (z_axis < joints3[j, 2] - np.asarray(radii))
        )
        labels.append(JointLabel.INVISIBLE if np.any(occluding) else JointLabel.VISIBLE)
    return labels


def bbox_from_joints(
    pose2d: Pose2D,
    labels: list[JointLabel],
    margin_frac: float = 0.10,
    frame: tuple[int, int] = (FRAME_WIDTH, FRAME_HEIGHT),
) -> tuple[float, float, float, float]:
    """Axis-aligned box over included joints, expanded and clipped to the frame.

    The margin is ``margin_frac`` of the larger raw side, added on every
    side.  Raises if every joint is not-included.
    """
    included = np.array([lab is not JointLabel.NOT_INCLUDED for lab in labels])
    if not np.any(included):
        raise ValidationError("cannot build a bbox: every joint is not-included")
    pts = pose2d.joints[included]
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    margin = margin_frac * max(x1 - x0, y1 - y0)
    w, h = frame
    x0 = max(x0 - margin, 0.0)
    y0 = max(y0 - margin, 0.0)
    x1 = min(x1 + margin, float(w))
    y1 = min(y1 + margin, float(h))
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def make_sample(config: SamplerConfig, sample_id: int, seed: int) -> DatasetSample:
    """Build one fully-annotated sample from its seed."""
    topology = canonical_topology()
    pose, scales, camera = sample_pose(config, seed)
    joints3d = forward_kinematics(topology, pose, scales)
    clean = project(joints3d, camera)
    spec = PerturbationSpec(bias_range=config.bias_range, seed=seed ^ _PERTURB_SEED_SALT)
    perturbed, record = perturb_projection(clean, topology, spec)

    labels = label_occlusion(
        joints3d, camera, config.occlusion_radii, topology, config.frame
    )
    # The sketch annotation is the perturbed pose: joints pushed outside the
    # frame by the perturbation are not part of the drawing.
    w, h = config.frame
    for j in range(NUM_JOINTS):
        u, v = perturbed.joints[j]
        if not (0.0 <= u < w and 0.0 <= v < h):
            labels[j] = JointLabel.NOT_INCLUDED

    bbox = bbox_from_joints(perturbed, labels, config.bbox_margin, config.frame)
    return DatasetSample(
        id=sample_id,
        joints2d_clean=clean,
        joints2d_perturbed=perturbed,
        joints3d=joints3d,
        pose_params=pose,
        bone_scales=scales,
        camera=camera,
        labels=labels,
        bbox=bbox,
        perturb=record,
        seed=seed,
    )


def synth_dataset(
    config: SamplerConfig, n: int, base_seed: int
) -> Iterator[DatasetSample]:
    """Stream ``n`` samples with ids 0..n-1; sample k is seeded by base_seed XOR k."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    if base_seed < 0:
        raise ValidationError("base_seed must be non-negative")
    for k in range(n):
        yield make_sample(config, k, base_seed ^ k)


def sample_heatmap(sample: DatasetSample, sigma: float = DEFAULT_SIGMA) -> Heatmap:
    """Encode the sample's perturbed joints as the standard heatmap stack."""
    return encode_heatmap(sample.joints2d_perturbed, sample.included_mask(), sigma=sigma)


# ---------------------------------------------------------------------------
# JSON Lines serialization
# ---------------------------------------------------------------------------


def sample_to_dict(sample: DatasetSample) -> dict:
    return {
        "id": sample.id,
        "joints2d_clean": sample.joints2d_clean.joints.tolist(),
        "joints2d_perturbed": sample.joints2d_perturbed.joints.tolist(),
        "joints3d": sample.joints3d.joints.tolist(),
        "pose_params": {
            "root_orientation": sample.pose_params.root_orientation.tolist(),
            "root_position": sample.pose_params.root_position.tolist(),
            "joint_rotations": sample.pose_params.joint_rotations.tolist(),
        },
        "bone_scales": sample.bone_scales.scales.tolist(),
        "camera": {
            "scale": float(sample.camera.scale),
            "tx": float(sample.camera.tx),
            "ty": float(sample.camera.ty),
        },
        "labels": [lab.value for lab in sample.labels],
        "bbox": [float(v) for v in sample.bbox],
        "perturb": sample.perturb.deltas.tolist(),
        "seed": sample.seed,
    }


def sample_from_dict(d: dict) -> DatasetSample:
    try:
        return DatasetSample(
            id=int(d["id"]),
            joints2d_clean=Pose2D(np.asarray(d["joints2d_clean"], dtype=float)),
            joints2d_perturbed=Pose2D(np.asarray(d["joints2d_perturbed"], dtype=float)),
            joints3d=Pose3D(np.asarray(d["joints3d"], dtype=float)),
            pose_params=PoseParams(
                root_orientation=np.asarray(
                    d["pose_params"]["root_orientation"], dtype=float
                ),
                joint_rotations=np.asarray(
                    d["pose_params"]["joint_rotations"], dtype=float
                ),
                root_position=np.asarray(
                    d["pose_params"]["root_position"], dtype=float
                ),
            ),
            bone_scales=BoneScales(np.asarray(d["bone_scales"], dtype=float)),
            camera=Camera(
                float(d["camera"]["scale"]),
                float(d["camera"]["tx"]),
                float(d["camera"]["ty"]),
            ),
            labels=[JointLabel(s) for s in d["labels"]],
            bbox=tuple(float(v) for v in d["bbox"]),
            perturb=PerturbRecord(np.asarray(d["perturb"], dtype=float)),
            seed=int(d["seed"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed sample record: {exc}") from exc


def write_dataset(path, samples: Iterable[DatasetSample]) -> int:
    """Write samples as JSON Lines; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_dict(sample)) + "\n")
            count += 1
    return count


def iter_dataset(path) -> Iterator[DatasetSample]:
    """Stream samples from a JSON Lines file, reporting bad lines by number."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield sample_from_dict(json.loads(line))
            except (json.JSONDecodeError, ValueError) as exc:
                raise DataFormatError(lineno, str(exc)) from exc


def read_dataset(path) -> list[DatasetSample]:
    return list(iter_dataset(path))
