"""Canonical 16-joint stick skeleton, axis-angle rotations, and forward kinematics.

The skeleton is a tree of 17 nodes: 16 exported joints plus an internal
pelvis root placed at the hip midpoint.  Joint rotations are axis-angle
3-vectors expressed relative to the parent frame; bone lengths are the
canonical rest proportions (1.70 m standing height) times per-bone scale
multipliers.

All functions here are pure and operate on immutable values, so they are
safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

# Exported joint indices.
HEAD, NECK = 0, 1
L_SHOULDER, R_SHOULDER = 2, 3
L_ELBOW, R_ELBOW = 4, 5
L_WRIST, R_WRIST = 6, 7
L_HIP, R_HIP = 8, 9
L_KNEE, R_KNEE = 10, 11
L_ANKLE, R_ANKLE = 12, 13
L_TOE, R_TOE = 14, 15

NUM_JOINTS = 16
NUM_BONES = 15
PELVIS = 16  # internal root node, not exported

JOINT_NAMES = (
    "head", "neck",
    "l_shoulder", "r_shoulder",
    "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
    "l_hip", "r_hip",
    "l_knee", "r_knee",
    "l_ankle", "r_ankle",
    "l_toe", "r_toe",
)

# Joints with no children; their rotations move nothing downstream.
LEAF_JOINTS = (HEAD, L_WRIST, R_WRIST, L_TOE, R_TOE)

# Canonical rest proportions in meters.  The ankle-to-toe link has length
# TOE_LENGTH but drops TOE_DROP vertically (toe at floor level, ankle above
# it), which is what makes head-to-toe rest height come out at exactly
# STANDING_HEIGHT when the vertical components are summed along the chains.
SPINE_LENGTH = 0.50      # pelvis -> neck
HEAD_LENGTH = 0.25       # neck -> head
SHOULDER_HALF = 0.18     # neck -> shoulder (lateral)
UPPER_ARM_LENGTH = 0.28  # shoulder -> elbow
FOREARM_LENGTH = 0.25    # elbow -> wrist
HIP_HALF = 0.10          # pelvis -> hip (lateral)
THIGH_LENGTH = 0.42      # hip -> knee
SHIN_LENGTH = 0.42       # knee -> ankle
TOE_LENGTH = 0.18        # ankle -> toe
TOE_DROP = 0.11          # vertical part of the ankle -> toe link
STANDING_HEIGHT = 1.70   # head y minus toe y at rest

PROPORTION_TABLE = {
    "pelvis_to_neck": SPINE_LENGTH,
    "neck_to_head": HEAD_LENGTH,
    "neck_to_shoulder": SHOULDER_HALF,
    "shoulder_to_elbow": UPPER_ARM_LENGTH,
    "elbow_to_wrist": FOREARM_LENGTH,
    "pelvis_to_hip": HIP_HALF,
    "hip_to_knee": THIGH_LENGTH,
    "knee_to_ankle": SHIN_LENGTH,
    "ankle_to_toe": TOE_LENGTH,
}

BONE_SCALE_MIN = 0.2
BONE_SCALE_MAX = 5.0


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


@dataclass(frozen=True)
class SkeletonTopology:
    """Fixed kinematic tree over 16 exported joints plus the pelvis root.

    Attributes:
        joint_names: the 16 exported joint identifiers.
        parent: per-node parent index, length 17; ``parent[PELVIS] == -1``.
        rest_offsets: (17, 3) child-relative-to-parent offsets in meters at
            the identity pose; the pelvis row is the zero vector (the pelvis
            sits at the hip midpoint by construction).
        bones: 15 ``(parent_joint, child_joint)`` pairs over exported joints,
            ordered root-to-leaf with the neck as the bone-tree root.  The
            two neck-to-hip entries are the torso bones; they span the
            internal pelvis node.
    """

    joint_names: tuple[str, ...]
    parent: np.ndarray
    rest_offsets: np.ndarray
    bones: tuple[tuple[int, int], ...]

    def _memo(self, key: str, build):
        cache = self.__dict__.setdefault("_cache", {})
        if key not in cache:
            cache[key] = build()
        return cache[key]

    def bone_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Parent and child joint index arrays for the bone list."""

        def build():
            b = np.asarray(self.bones, dtype=np.intp)
            return b[:, 0].copy(), b[:, 1].copy()

        return self._memo("bone_arrays", build)

    def node_order(self) -> tuple[int, ...]:
        """Node indices ordered parent-before-child, pelvis first."""

        def build():
            order = [PELVIS]
            remaining = [j for j in range(NUM_JOINTS)]
            placed = {PELVIS}
            while remaining:
                progressed = False
                for j in list(remaining):
                    if int(self.parent[j]) in placed:
                        order.append(j)
                        placed.add(j)
                        remaining.remove(j)
                        progressed = True
                if not progressed:
                    raise ValidationError(
                        "parent relation is not a tree rooted at the pelvis"
                    )
            return tuple(order)

        return self._memo("node_order", build)

    def bone_children(self) -> dict[int, list[int]]:
        """Child-bone indices per joint in the bone tree."""
        children: dict[int, list[int]] = {j: [] for j in range(NUM_JOINTS)}
        for i, (p, _) in enumerate(self.bones):
            children[p].append(i)
        return children

    def bone_descendant_joints(self) -> tuple[tuple[int, ...], ...]:
        """For every bone, the child joint plus all joints below it."""

        def build():
            kids = {j: [] for j in range(NUM_JOINTS)}
            for p, c in self.bones:
                kids[p].append(c)
            out = []
            for _, c in self.bones:
                stack, seen = [c], []
                while stack:
                    j = stack.pop()
                    seen.append(j)
                    stack.extend(kids[j])
                out.append(tuple(sorted(seen)))
            return tuple(out)

        return self._memo("bone_descendants", build)


# Bone list, root-to-leaf.  Torso bones (neck->hip) are indices 7 and 11.
_BONES = (
    (NECK, HEAD),
    (NECK, L_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (NECK, R_SHOULDER),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (NECK, L_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
    (L_ANKLE, L_TOE),
    (NECK, R_HIP),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
    (R_ANKLE, R_TOE),
)
TORSO_BONES = (7, 11)

# Map each joint to the bone whose child it is; the neck is the bone-tree
# root and has no owning bone.
BONE_OF_CHILD = {c: i for i, (_, c) in enumerate(_BONES)}

# Bone side labels for rendering: l / r / c.
BONE_SIDES = tuple(
    "c" if c == HEAD else ("l" if JOINT_NAMES[c].startswith("l_") else "r")
    for _, c in _BONES
)


@lru_cache(maxsize=1)
def canonical_topology() -> SkeletonTopology:
    """The fixed 16-joint topology with canonical rest proportions."""
    parent = np.full(17, -1, dtype=np.intp)
    parent[PELVIS] = -1
    parent[NECK] = PELVIS
    parent[HEAD] = NECK
    parent[L_SHOULDER] = NECK
    parent[R_SHOULDER] = NECK
    parent[L_ELBOW] = L_SHOULDER
    parent[R_ELBOW] = R_SHOULDER
    parent[L_WRIST] = L_ELBOW
    parent[R_WRIST] = R_ELBOW
    parent[L_HIP] = PELVIS
    parent[R_HIP] = PELVIS
    parent[L_KNEE] = L_HIP
    parent[R_KNEE] = R_HIP
    parent[L_ANKLE] = L_KNEE
    parent[R_ANKLE] = R_KNEE
    parent[L_TOE] = L_ANKLE
    parent[R_TOE] = R_ANKLE

    toe_forward = float(np.sqrt(TOE_LENGTH**2 - TOE_DROP**2))
    offsets = np.zeros((17, 3))
    offsets[NECK] = (0.0, SPINE_LENGTH, 0.0)
    offsets[HEAD] = (0.0, HEAD_LENGTH, 0.0)
    offsets[L_SHOULDER] = (SHOULDER_HALF, 0.0, 0.0)
    offsets[R_SHOULDER] = (-SHOULDER_HALF, 0.0, 0.0)
    offsets[L_ELBOW] = (0.0, -UPPER_ARM_LENGTH, 0.0)
    offsets[R_ELBOW] = (0.0, -UPPER_ARM_LENGTH, 0.0)
    offsets[L_WRIST] = (0.0, -FOREARM_LENGTH, 0.0)
    offsets[R_WRIST] = (0.0, -FOREARM_LENGTH, 0.0)
    offsets[L_HIP] = (HIP_HALF, 0.0, 0.0)
    offsets[R_HIP] = (-HIP_HALF, 0.0, 0.0)
    offsets[L_KNEE] = (0.0, -THIGH_LENGTH, 0.0)
    offsets[R_KNEE] = (0.0, -THIGH_LENGTH, 0.0)
    offsets[L_ANKLE] = (0.0, -SHIN_LENGTH, 0.0)
    offsets[R_ANKLE] = (0.0, -SHIN_LENGTH, 0.0)
    # Toes point toward the viewer (negative z is nearer the camera).
    offsets[L_TOE] = (0.0, -TOE_DROP, -toe_forward)
    offsets[R_TOE] = (0.0, -TOE_DROP, -toe_forward)

    parent.setflags(write=False)
    offsets.setflags(write=False)
    return SkeletonTopology(
        joint_names=JOINT_NAMES,
        parent=parent,
        rest_offsets=offsets,
        bones=_BONES,
    )


@dataclass
class PoseParams:
    """Axis-angle pose state.

    ``joint_rotations`` has one 3-vector per exported joint (leaf rotations
    exist in the parameter layout but move no positions).  ``root_orientation``
    is the pelvis frame, ``root_position`` the pelvis location in meters.
    """

    root_orientation: np.ndarray
    joint_rotations: np.ndarray
    root_position: np.ndarray

    def copy(self) -> "PoseParams":
        return PoseParams(
            self.root_orientation.copy(),
            self.joint_rotations.copy(),
            self.root_position.copy(),
        )


@dataclass
class BoneScales:
    """Per-bone length multipliers on the rest proportions, 15 values.

    Valid scales lie in (0.2, 5.0); the default is all ones.  The two torso
    bones share one physical spine link, so samplers keep them equal (see
    ``forward_kinematics``).
    """

    scales: np.ndarray

    def copy(self) -> "BoneScales":
        return BoneScales(self.scales.copy())

    def validate(self) -> None:
        s = self.scales
        if s.shape != (NUM_BONES,):
            raise ValidationError(f"expected {NUM_BONES} bone scales, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValidationError("bone scales must be finite")
        if np.any(s <= BONE_SCALE_MIN) or np.any(s >= BONE_SCALE_MAX):
            raise ValidationError(
                f"bone scales must lie in ({BONE_SCALE_MIN}, {BONE_SCALE_MAX})"
            )


@dataclass
class Pose3D:
    """World-frame joint positions in meters, shape (16, 3)."""

    joints: np.ndarray


def identity_pose() -> PoseParams:
    """Rest pose: all rotations zero, root at the origin."""
    return PoseParams(
        root_orientation=np.zeros(3),
        joint_rotations=np.zeros((NUM_JOINTS, 3)),
        root_position=np.zeros(3),
    )


def unit_scales() -> BoneScales:
    return BoneScales(np.ones(NUM_BONES))


# ---------------------------------------------------------------------------
# Axis-angle rotations
# ---------------------------------------------------------------------------

_SMALL_ANGLE = 1e-4


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _skew_batch(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    k = np.zeros((n, 3, 3))
    k[:, 0, 1] = -v[:, 2]
    k[:, 0, 2] = v[:, 1]
    k[:, 1, 0] = v[:, 2]
    k[:, 1, 2] = -v[:, 0]
    k[:, 2, 0] = -v[:, 1]
    k[:, 2, 1] = v[:, 0]
    return k


_E_BASIS = np.stack(
    [
        skew(np.array([1.0, 0.0, 0.0])),
        skew(np.array([0.0, 1.0, 0.0])),
        skew(np.array([0.0, 0.0, 1.0])),
    ]
)


def _rodrigues_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def so3_matrix(v: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle 3-vector (Rodrigues)."""
    return so3_matrix_batch(np.asarray(v, dtype=float)[None, :])[0]


def so3_matrix_batch(v: np.ndarray) -> np.ndarray:
    """Rotation matrices for a stack of axis-angle vectors, shape (N, 3, 3).

    R = I + a [v]x + b [v]x^2 with a = sin t / t, b = (1 - cos t) / t^2.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    theta = np.sqrt(np.einsum("ij,ij->i", v, v))
    a, b = _rodrigues_coeffs(theta)

    k = _skew_batch(v)
    k2 = k @ k
    out = a[:, None, None] * k + b[:, None, None] * k2
    out[:, 0, 0] += 1.0
    out[:, 1, 1] += 1.0
    out[:, 2, 2] += 1.0
    return out


def so3_derivative_batch(v: np.ndarray) -> np.ndarray:
    """Per-component derivatives dR/dv_k of the Rodrigues map, shape (N, 3, 3, 3).

    Output index order is (batch, component k, row, col).  Uses

        dR/dv_k = c1 v_k [v]x + a [e_k]x + c2 v_k [v]x^2 + b ([e_k]x [v]x + [v]x [e_k]x)

    with c1 = (t cos t - sin t)/t^3 and c2 = (t sin t + 2 cos t - 2)/t^4,
    both series-expanded near t = 0.
    """
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    theta = np.sqrt(np.einsum("ij,ij->i", v, v))
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)

    a, b = _rodrigues_coeffs(theta)
    c1 = np.where(
        small,
        -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
        (safe * np.cos(safe) - np.sin(safe)) / safe**3,
    )
    c2 = np.where(
        small,
        -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        (safe * np.sin(safe) + 2.0 * np.cos(safe) - 2.0) / safe**4,
    )

    k = _skew_batch(v)
    k2 = k @ k

    # [e_k]x K and K [e_k]x assembled by row/column shuffles of K: cheaper
    # than general contractions for these constant sparse factors.
    ek_k = np.empty((n, 3, 3, 3))
    ek_k[:, 0, 0, :] = 0.0
    ek_k[:, 0, 1, :] = -k[:, 2, :]
    ek_k[:, 0, 2, :] = k[:, 1, :]
    ek_k[:, 1, 0, :] = k[:, 2, :]
    ek_k[:, 1, 1, :] = 0.0
    ek_k[:, 1, 2, :] = -k[:, 0, :]
    ek_k[:, 2, 0, :] = -k[:, 1, :]
    ek_k[:, 2, 1, :] = k[:, 0, :]
    ek_k[:, 2, 2, :] = 0.0

    k_ek = np.empty((n, 3, 3, 3))
    k_ek[:, 0, :, 0] = 0.0
    k_ek[:, 0, :, 1] = k[:, :, 2]
    k_ek[:, 0, :, 2] = -k[:, :, 1]
    k_ek[:, 1, :, 0] = -k[:, :, 2]
    k_ek[:, 1, :, 1] = 0.0
    k_ek[:, 1, :, 2] = k[:, :, 0]
    k_ek[:, 2, :, 0] = k[:, :, 1]
    k_ek[:, 2, :, 1] = -k[:, :, 0]
    k_ek[:, 2, :, 2] = 0.0

    out = (
        (c1[:, None] * v)[:, :, None, None] * k[:, None, :, :]
        + a[:, None, None, None] * _E_BASIS[None, :, :, :]
        + (c2[:, None] * v)[:, :, None, None] * k2[:, None, :, :]
        + b[:, None, None, None] * (ek_k + k_ek)
    )
    return out


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Equivalent axis-angle with magnitude in [0, pi].

    Wraps the rotation angle into (-pi, pi]; a negative wrapped angle flips
    the stored vector, which leaves the rotation unchanged.
    """
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta <= np.pi or theta == 0.0:
        return v.copy()
    k = np.floor((theta + np.pi) / (2.0 * np.pi))
    theta_c = theta - 2.0 * np.pi * k
    return v * (theta_c / theta)


def canonicalize_jacobian(v: np.ndarray) -> np.ndarray:
    """Jacobian of ``canonicalize_axis_angle`` at ``v`` (a.e.)."""
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta <= np.pi or theta == 0.0:
        return np.eye(3)
    k = np.floor((theta + np.pi) / (2.0 * np.pi))
    g = (theta - 2.0 * np.pi * k) / theta
    return g * np.eye(3) + (2.0 * np.pi * k / theta**3) * np.outer(v, v)


def canonicalize_stack(v: np.ndarray) -> np.ndarray:
    """Row-wise ``canonicalize_axis_angle`` for an (N, 3) stack."""
    v = np.asarray(v, dtype=float)
    theta = np.sqrt(np.einsum("ij,ij->i", v, v))
    wrapped = theta > np.pi
    if not np.any(wrapped):
        return v.copy()
    k = np.floor((theta + np.pi) / (2.0 * np.pi))
    safe = np.where(wrapped, theta, 1.0)
    factor = np.where(wrapped, (theta - 2.0 * np.pi * k) / safe, 1.0)
    return v * factor[:, None]


def apply_canonicalize_jacobian_T(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Row-wise J(v_i)^T @ g_i for an (N, 3) stack; identity rows take a fast path."""
    v = np.asarray(v, dtype=float)
    theta = np.sqrt(np.einsum("ij,ij->i", v, v))
    wrapped = theta > np.pi
    out = g.copy()
    for i in np.nonzero(wrapped)[0]:
        out[i] = canonicalize_jacobian(v[i]).T @ g[i]
    return out


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------


@dataclass
class FkCache:
    """Intermediate forward-kinematics state kept for gradient computation."""

    positions: np.ndarray       # (17, 3) node positions
    accumulated: np.ndarray     # (17, 3, 3) accumulated rotations
    local_rotations: np.ndarray  # (17, 3, 3), pelvis row is the root orientation
    link_scales: np.ndarray     # (16,) scale applied to each joint's parent link
    node_order: tuple[int, ...]


_LINK_BONE_INDEX = np.array(
    [BONE_OF_CHILD[j] if j != NECK else 0 for j in range(NUM_JOINTS)], dtype=np.intp
)


def link_scales_from_bones(scales: np.ndarray) -> np.ndarray:
    """Scale applied to each node link, derived from the 15 bone scales.

    Every joint except the neck is the child of exactly one bone and its
    link takes that bone's scale.  The neck link (the spine) carries the
    mean of the two torso-bone scales, so uniform scaling of all bones
    scales every link uniformly and, when the torso pair is equal, every
    bone length is exactly scale times rest length.
    """
    ls = scales[_LINK_BONE_INDEX]
    ls[NECK] = 0.5 * (scales[TORSO_BONES[0]] + scales[TORSO_BONES[1]])
    return ls


def fk_forward(
    topology: SkeletonTopology, pose: PoseParams, scales: BoneScales
) -> FkCache:
    """Run forward kinematics and keep all intermediates."""
    rot_in = np.empty((17, 3))
    rot_in[:NUM_JOINTS] = pose.joint_rotations
    rot_in[PELVIS] = pose.root_orientation
    if not np.all(np.isfinite(rot_in)) or not np.all(np.isfinite(pose.root_position)):
        raise ValidationError("pose parameters must be finite")
    if np.any(~np.isfinite(scales.scales)) or np.any(scales.scales <= 0.0):
        raise ValidationError("bone scales must be finite and positive")

    local = so3_matrix_batch(rot_in)  # rows 0..15 joints, row 16 pelvis
    ls = link_scales_from_bones(scales.scales)

    positions = np.empty((17, 3))
    accumulated = np.empty((17, 3, 3))
    positions[PELVIS] = pose.root_position
    accumulated[PELVIS] = local[PELVIS]

    order = topology.node_order()
    scaled_offsets = topology.rest_offsets[:NUM_JOINTS] * ls[:, None]
    parent = topology.parent
    for j in order[1:]:
        m = int(parent[j])
        am = accumulated[m]
        positions[j] = positions[m] + am @ scaled_offsets[j]
        accumulated[j] = am @ local[j]

    return FkCache(
        positions=positions,
        accumulated=accumulated,
        local_rotations=local,
        link_scales=ls,
        node_order=order,
    )


def forward_kinematics(
    topology: SkeletonTopology, pose: PoseParams, scales: BoneScales
) -> Pose3D:
    """World joint positions from pose parameters.

    Each child position is its parent position plus the accumulated parent
    rotation applied to the scaled rest offset.  Deterministic: identical
    inputs give bitwise-identical outputs.
    """
    cache = fk_forward(topology, pose, scales)
    return Pose3D(cache.positions[:NUM_JOINTS].copy())


def bone_vectors(joints: np.ndarray, topology: SkeletonTopology) -> np.ndarray:
    """Child-minus-parent vectors for all 15 bones; works for 2D or 3D joints."""
    bp, bc = topology.bone_arrays()
    return joints[bc] - joints[bp]


def bone_rest_lengths(topology: SkeletonTopology) -> np.ndarray:
    """Rest length of each bone (norm of the rest displacement between its joints)."""
    rest = rest_joint_positions(topology)
    return np.linalg.norm(bone_vectors(rest, topology), axis=1)


def rest_joint_positions(topology: SkeletonTopology) -> np.ndarray:
    """Joint positions at the identity pose with unit scales, pelvis at origin."""
    cache = fk_forward(topology, identity_pose(), unit_scales())
    return cache.positions[:NUM_JOINTS].copy()
