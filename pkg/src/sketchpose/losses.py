"""Training objective: bone-parallelism, foreshortening, pose, and shape terms.

The weighted objective is

    total = w_parallel * L_parallel + w_foreshorten * L_f
          + w_pose * L_pose + w_shape * L_shape

with analytic gradients with respect to the full estimation state
(root orientation, per-joint rotations, root position, bone scales, camera).
Setting a weight to zero disables its term, which is the ablation switch.

Flat parameter layout used by ``pack_state`` / ``LossBreakdown.gradient``:

    [ 0: 3]  root_orientation
    [ 3:51]  joint_rotations, 16 joints x 3, row-major in joint order
    [51:54]  root_position
    [54:69]  bone_scales, 15 values in bone order
    [69:72]  camera (scale, tx, ty)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .projection import MIN_BONE_2D, Camera, Pose2D, project
from .skeleton import (
    BONE_OF_CHILD,
    NECK,
    NUM_BONES,
    NUM_JOINTS,
    PELVIS,
    TORSO_BONES,
    BoneScales,
    FkCache,
    Pose3D,
    PoseParams,
    SkeletonTopology,
    ValidationError,
    apply_canonicalize_jacobian_T,
    canonical_topology,
    canonicalize_axis_angle,
    canonicalize_stack,
    fk_forward,
    so3_derivative_batch,
)

N_PARAMS = 72
ROOT_ORIENT = slice(0, 3)
JOINT_ROT = slice(3, 51)
ROOT_POS = slice(51, 54)
SCALES = slice(54, 69)
CAMERA = slice(69, 72)

# 51 rotation parameters enter the pose term: root plus 16 joints.
N_ROT_PARAMS = 3 + 3 * NUM_JOINTS

# Denominator floor for gradient-check relative errors.  Central differences
# carry round-off noise of order eps_machine * loss / h (~1e-9 absolute at
# h = 1e-5), so parameters whose true gradient is essentially zero are
# compared against this floor instead of their own magnitude.
REL_ERR_FLOOR = 1e-4

DEFAULT_WEIGHT_PARALLEL = 3.0
DEFAULT_WEIGHT_FORESHORTEN = 3.0
DEFAULT_WEIGHT_POSE = 2.0
DEFAULT_WEIGHT_SHAPE = 1.0


class LossComputationError(ArithmeticError):
    """A loss term produced a non-finite intermediate."""


@dataclass
class LossWeights:
    """Non-negative term weights; defaults are the standard 3, 3, 2, 1."""

    parallel: float = DEFAULT_WEIGHT_PARALLEL
    foreshorten: float = DEFAULT_WEIGHT_FORESHORTEN
    pose: float = DEFAULT_WEIGHT_POSE
    shape: float = DEFAULT_WEIGHT_SHAPE

    def validate(self) -> None:
        vals = (self.parallel, self.foreshorten, self.pose, self.shape)
        if not all(np.isfinite(v) and v >= 0.0 for v in vals):
            raise ValidationError("loss weights must be finite and non-negative")


@dataclass
class LossBreakdown:
    """Per-term values, the weighted total, and optionally the full gradient."""

    parallel: float
    foreshortening: float
    pose: float
    shape: float
    total: float
    gradient: np.ndarray | None = None


@dataclass
class FitTargets:
    """Supervision bundle for one sample.

    ``gt2d`` is the 2D target (perturbed sketch-like joints by default);
    the 3D-side fields are optional and disable their terms when absent.
    ``gt_camera_scale`` fixes the pixel scale used for the ground-truth side
    of the foreshortening ratios; 1.0 when unknown.  ``joint_mask`` marks
    joints usable by the 2D terms (not-included joints are masked out).
    """

    gt2d: Pose2D
    gt3d: Pose3D | None = None
    gt_pose: PoseParams | None = None
    gt_scales: BoneScales | None = None
    gt_camera_scale: float | None = None
    joint_mask: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def mask(self) -> np.ndarray:
        if self.joint_mask is None:
            return np.ones(NUM_JOINTS, dtype=bool)
        return np.asarray(self.joint_mask, dtype=bool)

    def _cached(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]


# ---------------------------------------------------------------------------
# State packing
# ---------------------------------------------------------------------------


def pack_state(pose: PoseParams, scales: BoneScales, camera: Camera) -> np.ndarray:
    """Flatten the estimation state into the documented 72-vector layout."""
    vec = np.empty(N_PARAMS)
    vec[ROOT_ORIENT] = pose.root_orientation
    vec[JOINT_ROT] = pose.joint_rotations.reshape(-1)
    vec[ROOT_POS] = pose.root_position
    vec[SCALES] = scales.scales
    vec[CAMERA] = (camera.scale, camera.tx, camera.ty)
    return vec


def unpack_state(vec: np.ndarray) -> tuple[PoseParams, BoneScales, Camera]:
    """Inverse of ``pack_state``."""
    vec = np.asarray(vec, dtype=float)
    pose = PoseParams(
        root_orientation=vec[ROOT_ORIENT].copy(),
        joint_rotations=vec[JOINT_ROT].reshape(NUM_JOINTS, 3).copy(),
        root_position=vec[ROOT_POS].copy(),
    )
    scales = BoneScales(vec[SCALES].copy())
    camera = Camera(float(vec[69]), float(vec[70]), float(vec[71]))
    return pose, scales, camera


def param_labels() -> list[str]:
    """Human-readable name per flat parameter, for gradient reports."""
    from .skeleton import JOINT_NAMES

    labels = [f"root_orientation[{k}]" for k in "xyz"]
    for name in JOINT_NAMES:
        labels += [f"rot[{name}].{k}" for k in "xyz"]
    labels += [f"root_position[{k}]" for k in "xyz"]
    labels += [f"bone_scale[{i}]" for i in range(NUM_BONES)]
    labels += ["camera.scale", "camera.tx", "camera.ty"]
    return labels


# ---------------------------------------------------------------------------
# Individual terms
# ---------------------------------------------------------------------------


def _bone_vectors_and_norms(joints: np.ndarray, bp: np.ndarray, bc: np.ndarray):
    vecs = joints[bc] - joints[bp]
    return vecs, np.linalg.norm(vecs, axis=1)


def _bone_mask(mask: np.ndarray, bp: np.ndarray, bc: np.ndarray) -> np.ndarray:
    return mask[bp] & mask[bc]


def _parallel_term(
    gb: np.ndarray,
    gn: np.ndarray,
    pb: np.ndarray,
    pn: np.ndarray,
    use: np.ndarray,
    want_grad: bool,
) -> tuple[float, np.ndarray | None]:
    """Sum of squared dot products between unit GT bones and predicted-bone normals.

    The normal of a predicted 2D bone is its +90 degree rotation; the sign is
    irrelevant because the dot product is squared.  Returns the term value
    and, optionally, its gradient with respect to the predicted bone vectors.
    """
    use = use & (gn >= MIN_BONE_2D) & (pn >= MIN_BONE_2D)
    grads = np.zeros_like(pb) if want_grad else None
    if not np.any(use):
        return 0.0, grads

    g = gb[use]
    p = pb[use]
    n = pn[use]
    # Cross product before normalization: identical bones give exactly zero.
    q = gn[use] * n
    c = (g[:, 1] * p[:, 0] - g[:, 0] * p[:, 1]) / q
    value = float(np.sum(c * c))
    if want_grad:
        rot = np.stack([g[:, 1], -g[:, 0]], axis=1)
        dc = rot / q[:, None] - (c / (n * n))[:, None] * p
        grads[use] = 2.0 * c[:, None] * dc
    return value, grads


def _ratio_and_grads(
    b3: np.ndarray,
    n3: np.ndarray,
    b2: np.ndarray,
    n2: np.ndarray,
    scale: float,
    mode: str,
    want_grad: bool,
):
    """Per-bone foreshortening ratios plus partials w.r.t. b2, b3, and scale."""
    if mode == "cosine":
        raw = n2 / (scale * n3)
        clamped = raw > 1.0
        r = np.where(clamped, 1.0, raw)
        if not want_grad:
            return r, None, None, None
        live = (~clamped).astype(float)
        dr_db2 = live[:, None] * b2 / (n2 * scale * n3)[:, None]
        dr_db3 = live[:, None] * (-(n2 / (scale * n3**3)))[:, None] * b3
        dr_ds = live * (-n2 / (scale * scale * n3))
        return r, dr_db2, dr_db3, dr_ds
    if mode == "as-written":
        den = np.maximum(n2, MIN_BONE_2D)
        r = scale * n3 / den
        if not want_grad:
            return r, None, None, None
        live = (n2 > MIN_BONE_2D).astype(float)
        dr_db3 = scale * b3 / (n3 * den)[:, None]
        dr_db2 = live[:, None] * (-(scale * n3 / (den * den * n2)))[:, None] * b2
        dr_ds = n3 / den
        return r, dr_db2, dr_db3, dr_ds
    raise ValidationError(f"unknown foreshortening mode: {mode!r}")


def loss_parallel(
    gt2d: Pose2D,
    pred2d: Pose2D,
    topology: SkeletonTopology | None = None,
    mask: np.ndarray | None = None,
) -> float:
    """Parallelism penalty between ground-truth and predicted projected bones.

    Invariant to positive per-bone rescaling of either pose and to a common
    2D rotation of both.  Bones shorter than 1e-6 px on either side, or with
    a masked endpoint, contribute zero.
    """
    topology = topology or canonical_topology()
    bp, bc = topology.bone_arrays()
    m = np.ones(NUM_JOINTS, bool) if mask is None else np.asarray(mask, bool)
    gb, gn = _bone_vectors_and_norms(gt2d.joints, bp, bc)
    pb, pn = _bone_vectors_and_norms(pred2d.joints, bp, bc)
    value, _ = _parallel_term(gb, gn, pb, pn, _bone_mask(m, bp, bc), False)
    return value


def loss_foreshortening(
    gt3d: Pose3D,
    gt2d: Pose2D,
    pred3d: Pose3D,
    pred2d: Pose2D,
    topology: SkeletonTopology | None = None,
    mode: str = "cosine",
    gt_scale: float | None = None,
    pred_scale: float | None = None,
    mask: np.ndarray | None = None,
) -> float:
    """Sum of squared per-bone foreshortening-ratio differences.

    Each side's ratio follows ``foreshortening_ratio`` under ``mode``; the
    pixel scales default to 1.0, which reproduces the raw 3D/2D length ratio.
    Degenerate bones are skipped as in ``loss_parallel``.
    """
    topology = topology or canonical_topology()
    bp, bc = topology.bone_arrays()
    m = np.ones(NUM_JOINTS, bool) if mask is None else np.asarray(mask, bool)

    g3, n_g3 = _bone_vectors_and_norms(gt3d.joints, bp, bc)
    g2, n_g2 = _bone_vectors_and_norms(gt2d.joints, bp, bc)
    p3, n_p3 = _bone_vectors_and_norms(pred3d.joints, bp, bc)
    p2, n_p2 = _bone_vectors_and_norms(pred2d.joints, bp, bc)

    use = (
        _bone_mask(m, bp, bc)
        & (n_g2 >= MIN_BONE_2D)
        & (n_p2 >= MIN_BONE_2D)
        & (n_g3 > 0.0)
        & (n_p3 > 0.0)
    )
    if not np.any(use):
        return 0.0
    r_g, _, _, _ = _ratio_and_grads(
        g3[use], n_g3[use], g2[use], n_g2[use], gt_scale or 1.0, mode, False
    )
    r_p, _, _, _ = _ratio_and_grads(
        p3[use], n_p3[use], p2[use], n_p2[use], pred_scale or 1.0, mode, False
    )
    return float(np.sum((r_g - r_p) ** 2))


def _rotation_stack(pose: PoseParams) -> np.ndarray:
    """Rotation parameters in layout order: root first, then the 16 joints."""
    return np.vstack([pose.root_orientation[None, :], pose.joint_rotations])


def loss_pose(pred: PoseParams, gt: PoseParams) -> float:
    """Mean absolute difference over all 51 rotation parameters.

    Both sides are canonicalized (axis-angle magnitude wrapped into [0, pi])
    first, so parameterizations of the same rotation compare equal.
    """
    p = np.vstack([canonicalize_axis_angle(v) for v in _rotation_stack(pred)])
    g = np.vstack([canonicalize_axis_angle(v) for v in _rotation_stack(gt)])
    return float(np.mean(np.abs(p - g)))


def loss_shape(pred: BoneScales, gt: BoneScales) -> float:
    """Mean absolute difference over the 15 bone scales."""
    return float(np.mean(np.abs(pred.scales - gt.scales)))


# ---------------------------------------------------------------------------
# Total objective with gradient
# ---------------------------------------------------------------------------


def total_loss(
    state: tuple[PoseParams, BoneScales, Camera],
    targets: FitTargets,
    weights: LossWeights | None = None,
    topology: SkeletonTopology | None = None,
    mode: str = "cosine",
    want_gradient: bool = True,
) -> LossBreakdown:
    """Evaluate the weighted objective at ``state`` with its analytic gradient.

    Runs forward kinematics and projection on the state, evaluates every
    enabled term (weight > 0 and targets present), and backpropagates through
    the projection and the kinematic chain.  Term values in the breakdown are
    unweighted; ``total`` is the weighted sum.

    Raises ``LossComputationError`` naming the offending term if any value
    comes out non-finite.
    """
    pose, scales, camera = state
    weights = weights or LossWeights()
    weights.validate()
    topology = topology or canonical_topology()
    camera.validate()

    cache = fk_forward(topology, pose, scales)
    joints3 = cache.positions[:NUM_JOINTS]
    pred3d = Pose3D(joints3)
    pred2d = project(pred3d, camera)
    joints2 = pred2d.joints

    bp, bc = topology.bone_arrays()
    bone_use = _bone_mask(targets.mask(), bp, bc)

    g2d = np.zeros((NUM_JOINTS, 2))   # d total / d predicted 2D joints
    g3d = np.zeros((NUM_JOINTS, 3))   # d total / d predicted 3D joints (direct part)
    g_cam = np.zeros(3)               # scale, tx, ty
    grad = np.zeros(N_PARAMS) if want_gradient else None

    p2, n_p2 = _bone_vectors_and_norms(joints2, bp, bc)
    p3, n_p3 = _bone_vectors_and_norms(joints3, bp, bc)

    # Parallelism term.
    value_parallel = 0.0
    if weights.parallel > 0.0:
        gb, gn = _bone_vectors_and_norms(targets.gt2d.joints, bp, bc)
        value_parallel, dpb = _parallel_term(gb, gn, p2, n_p2, bone_use, want_gradient)
        if want_gradient:
            w_dpb = weights.parallel * dpb
            np.add.at(g2d, bc, w_dpb)
            np.subtract.at(g2d, bp, w_dpb)

    # Foreshortening term.
    value_foreshorten = 0.0
    if weights.foreshorten > 0.0 and targets.gt3d is not None:
        g3, n_g3 = _bone_vectors_and_norms(targets.gt3d.joints, bp, bc)
        g2, n_g2 = _bone_vectors_and_norms(targets.gt2d.joints, bp, bc)
        use = (
            bone_use
            & (n_g2 >= MIN_BONE_2D)
            & (n_p2 >= MIN_BONE_2D)
            & (n_g3 > 0.0)
            & (n_p3 > 0.0)
        )
        if np.any(use):
            gt_scale = targets.gt_camera_scale or 1.0
            r_g, _, _, _ = _ratio_and_grads(
                g3[use], n_g3[use], g2[use], n_g2[use], gt_scale, mode, False
            )
            r_p, dr_db2, dr_db3, dr_ds = _ratio_and_grads(
                p3[use], n_p3[use], p2[use], n_p2[use], camera.scale, mode, want_gradient
            )
            diff = r_g - r_p
            value_foreshorten = float(np.sum(diff * diff))
            if want_gradient:
                coeff = weights.foreshorten * 2.0 * (r_p - r_g)
                gb2 = coeff[:, None] * dr_db2
                gb3 = coeff[:, None] * dr_db3
                np.add.at(g2d, bc[use], gb2)
                np.subtract.at(g2d, bp[use], gb2)
                np.add.at(g3d, bc[use], gb3)
                np.subtract.at(g3d, bp[use], gb3)
                g_cam[0] += float(np.sum(coeff * dr_ds))

    # Pose parameter term (L1 after canonicalization).
    value_pose = 0.0
    if weights.pose > 0.0 and targets.gt_pose is not None:
        raw = _rotation_stack(pose)
        cpred = np.vstack([canonicalize_axis_angle(v) for v in raw])
        cgt = np.vstack(
            [canonicalize_axis_angle(v) for v in _rotation_stack(targets.gt_pose)]
        )
        diff = cpred - cgt
        value_pose = float(np.mean(np.abs(diff)))
        if want_gradient:
            sgn = np.sign(diff) * (weights.pose / N_ROT_PARAMS)
            rot_grads = np.empty_like(raw)
            for i, v in enumerate(raw):
                rot_grads[i] = canonicalize_jacobian(v).T @ sgn[i]
            grad[ROOT_ORIENT] += rot_grads[0]
            grad[JOINT_ROT] += rot_grads[1:].reshape(-1)

    # Shape term.
    value_shape = 0.0
    if weights.shape > 0.0 and targets.gt_scales is not None:
        d = scales.scales - targets.gt_scales.scales
        value_shape = float(np.mean(np.abs(d)))
        if want_gradient:
            grad[SCALES] += np.sign(d) * (weights.shape / NUM_BONES)

    for name, value in (
        ("parallel", value_parallel),
        ("foreshortening", value_foreshorten),
        ("pose", value_pose),
        ("shape", value_shape),
    ):
        if not np.isfinite(value):
            raise LossComputationError(f"non-finite value in {name} term")

    total = (
        weights.parallel * value_parallel
        + weights.foreshorten * value_foreshorten
        + weights.pose * value_pose
        + weights.shape * value_shape
    )

    if want_gradient:
        # Projection backward: u = s*x + tx, v = -s*y + ty.
        g3d[:, 0] += camera.scale * g2d[:, 0]
        g3d[:, 1] += -camera.scale * g2d[:, 1]
        g_cam[0] += float(np.sum(g2d[:, 0] * joints3[:, 0] - g2d[:, 1] * joints3[:, 1]))
        g_cam[1] += float(np.sum(g2d[:, 0]))
        g_cam[2] += float(np.sum(g2d[:, 1]))

        root_grad, joint_grad, pos_grad, scale_grad = _fk_backward(
            topology, cache, pose, g3d
        )
        grad[ROOT_ORIENT] += root_grad
        grad[JOINT_ROT] += joint_grad.reshape(-1)
        grad[ROOT_POS] += pos_grad
        grad[SCALES] += scale_grad
        grad[CAMERA] += g_cam

    return LossBreakdown(
        parallel=value_parallel,
        foreshortening=value_foreshorten,
        pose=value_pose,
        shape=value_shape,
        total=float(total),
        gradient=grad,
    )


def _fk_backward(
    topology: SkeletonTopology,
    cache: FkCache,
    pose: PoseParams,
    g_joints: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Reverse accumulation through the kinematic chain.

    Takes d total / d joint positions and returns gradients for the root
    orientation, the 16 joint rotations, the root position, and the 15 bone
    scales.  Spine-link scale gradients split evenly between the two torso
    bones, mirroring ``link_scales_from_bones``.
    """
    parent = topology.parent
    offsets = topology.rest_offsets
    order = cache.node_order
    pos_grad = np.zeros((17, 3))
    pos_grad[:NUM_JOINTS] = g_joints
    acc_grad = np.zeros((17, 3, 3))
    link_grad = np.zeros(NUM_JOINTS)

    rot_stack = np.vstack([pose.joint_rotations, pose.root_orientation[None, :]])
    d_rot = so3_derivative_batch(rot_stack)  # (17, 3, 3, 3); row 16 is the root

    joint_grad = np.zeros((NUM_JOINTS, 3))
    for j in reversed(order[1:]):
        m = int(parent[j])
        am = cache.accumulated[m]
        gp = pos_grad[j]
        ga = acc_grad[j]
        off = offsets[j]

        acc_grad[m] += np.outer(gp, cache.link_scales[j] * off)
        link_grad[j] += float(gp @ (am @ off))
        pos_grad[m] += gp

        acc_grad[m] += ga @ cache.local_rotations[j].T
        local = am.T @ ga
        joint_grad[j] = np.einsum("kab,ab->k", d_rot[j], local)

    root_grad = np.einsum("kab,ab->k", d_rot[PELVIS], acc_grad[PELVIS])
    root_pos_grad = pos_grad[PELVIS].copy()

    scale_grad = np.zeros(NUM_BONES)
    for j in range(NUM_JOINTS):
        if j == NECK:
            scale_grad[TORSO_BONES[0]] += 0.5 * link_grad[j]
            scale_grad[TORSO_BONES[1]] += 0.5 * link_grad[j]
        else:
            scale_grad[BONE_OF_CHILD[j]] += link_grad[j]
    return root_grad, joint_grad, root_pos_grad, scale_grad


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    """Analytic vs central-difference gradients over the flat layout."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    max_rel_err: float
    h: float
    labels: list[str] = field(default_factory=param_labels)

    def to_dict(self) -> dict:
        worst = int(np.argmax(self.rel_err))
        return {
            "h": self.h,
            "max_rel_err": self.max_rel_err,
            "worst_param": self.labels[worst],
            "per_param": [
                {
                    "name": n,
                    "analytic": float(a),
                    "numeric": float(b),
                    "rel_err": float(e),
                }
                for n, a, b, e in zip(
                    self.labels, self.analytic, self.numeric, self.rel_err
                )
            ],
        }


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor absorbs finite-difference noise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_ERR_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    state: tuple[PoseParams, BoneScales, Camera],
    targets: FitTargets,
    weights: LossWeights | None = None,
    topology: SkeletonTopology | None = None,
    mode: str = "cosine",
    h: float = 1e-5,
) -> GradientCheckReport:
    """Compare the analytic gradient against central finite differences.

    ``h`` must lie strictly inside (1e-8, 1e-3).  Parameters whose weight is
    zero still get checked; their gradients simply come out zero on both
    sides.
    """
    if not (1e-8 < h < 1e-3):
        raise ValidationError("finite-difference step h must lie in (1e-8, 1e-3)")
    breakdown = total_loss(state, targets, weights, topology, mode, want_gradient=True)
    analytic = breakdown.gradient.copy()

    base = pack_state(*state)
    numeric = np.zeros(N_PARAMS)
    for i in range(N_PARAMS):
        hi, lo = base.copy(), base.copy()
        hi[i] += h
        lo[i] -= h
        up = total_loss(
            unpack_state(hi), targets, weights, topology, mode, want_gradient=False
        ).total
        down = total_loss(
            unpack_state(lo), targets, weights, topology, mode, want_gradient=False
        ).total
        numeric[i] = (up - down) / (2.0 * h)

    rel = relative_errors(analytic, numeric)
    return GradientCheckReport(
        analytic=analytic,
        numeric=numeric,
        rel_err=rel,
        max_rel_err=float(rel.max()),
        h=h,
    )
