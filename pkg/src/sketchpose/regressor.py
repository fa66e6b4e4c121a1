"""Feed-forward regressor from normalized 2D joints to pose, scales, and camera.

A small fully-connected trunk (two hidden layers of width 256) with three
linear heads: 51 rotation parameters, 15 raw bone scales mapped through
softplus plus a 0.2 floor, and the 3 camera parameters.  Training
backpropagates the weighted geometric objective through forward kinematics
and projection, so the 2D-consistency terms shape the weights directly.

Everything is plain numpy with explicit gradients; no autodiff framework.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import (
    CAMERA,
    FitTargets,
    JOINT_ROT,
    LossWeights,
    ROOT_ORIENT,
    SCALES,
    total_loss,
)
from .projection import Camera, Pose2D
from .skeleton import (
    L_HIP,
    NECK,
    NUM_BONES,
    NUM_JOINTS,
    R_HIP,
    BoneScales,
    PoseParams,
    ValidationError,
    canonical_topology,
)
from .synth import DatasetSample, JointLabel

INPUT_DIM = 2 * NUM_JOINTS  # 32
POSE_DIM = 3 + 3 * NUM_JOINTS  # 51
HIDDEN_DIM = 256
SCALE_FLOOR = 0.2

_FIELDS = (
    "w1", "b1", "w2", "b2",
    "w_pose", "b_pose", "w_scale", "b_scale", "w_cam", "b_cam",
)
_MAGIC = b"SKPR"
_VERSION = 1
_ACTIVATIONS = ("relu", "identity")


@dataclass
class MLPParams:
    """Trunk and head weights; ``activation`` selects the trunk nonlinearity."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_pose: np.ndarray
    b_pose: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    w_cam: np.ndarray
    b_cam: np.ndarray
    activation: str = "relu"

    def copy(self) -> "MLPParams":
        return MLPParams(
            *(getattr(self, f).copy() for f in _FIELDS), activation=self.activation
        )

    def n_weights(self) -> int:
        return sum(getattr(self, f).size for f in _FIELDS)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    decay_epochs: tuple[int, ...] = (30, 45)
    decay_factor: float = 0.3
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "cosine"
    seed: int = 0
    val_split: float = 0.2

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not (0.0 < self.val_split < 1.0):
            raise ValidationError("val_split must lie in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning_rate must be positive")


def init_params(seed: int = 0, hidden: int = HIDDEN_DIM, activation: str = "relu") -> MLPParams:
    """He-style trunk initialization; heads start near the rest-pose output.

    The raw-scale bias is softplus-inverse of 0.8 so initial bone scales are
    1.0 after the floor; the camera bias starts at a plausible scale and the
    frame center.
    """
    if activation not in _ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / INPUT_DIM), size=(INPUT_DIM, hidden))
    w2 = rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, hidden))
    w_pose = rng.normal(0.0, 0.01, size=(hidden, POSE_DIM))
    w_scale = rng.normal(0.0, 0.01, size=(hidden, NUM_BONES))
    w_cam = rng.normal(0.0, 0.01, size=(hidden, 3))
    b_scale = np.full(NUM_BONES, float(np.log(np.expm1(1.0 - SCALE_FLOOR))))
    return MLPParams(
        w1=w1,
        b1=np.zeros(hidden),
        w2=w2,
        b2=np.zeros(hidden),
        w_pose=w_pose,
        b_pose=np.zeros(POSE_DIM),
        w_scale=w_scale,
        b_scale=b_scale,
        w_cam=w_cam,
        b_cam=np.array([80.0, 96.0, 128.0]),
        activation=activation,
    )


# ---------------------------------------------------------------------------
# Input normalization
# ---------------------------------------------------------------------------


def normalize_joints(pose2d: Pose2D, labels: list[JointLabel] | None = None) -> np.ndarray:
    """Root-center at the hip midpoint and scale by the 2D torso length.

    The result is invariant to any positive-scale similarity (uniform scale
    plus translation) of the input.  Not-included joints are zeroed after
    normalization.  Requires at least 8 included joints and a non-degenerate
    torso (hip midpoint to neck distance above 1e-6 px).
    """
    joints = np.asarray(pose2d.joints, dtype=float)
    if labels is None:
        included = np.ones(NUM_JOINTS, dtype=bool)
    else:
        included = np.array([lab is not JointLabel.NOT_INCLUDED for lab in labels])
    if int(included.sum()) < 8:
        raise ValidationError("need at least 8 included joints to normalize")
    hip_mid = 0.5 * (joints[L_HIP] + joints[R_HIP])
    torso = float(np.linalg.norm(joints[NECK] - hip_mid))
    if torso < 1e-6:
        raise ValidationError("degenerate torso: hip midpoint coincides with neck")
    out = (joints - hip_mid) / torso
    out[~included] = 0.0
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _act(params: MLPParams, x: np.ndarray) -> np.ndarray:
    if params.activation == "relu":
        return np.maximum(x, 0.0)
    return x


def _act_grad(params: MLPParams, pre: np.ndarray) -> np.ndarray:
    if params.activation == "relu":
        return (pre > 0.0).astype(float)
    return np.ones_like(pre)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class _ForwardCache:
    x: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    y_pose: np.ndarray
    y_scale_raw: np.ndarray
    y_cam: np.ndarray


def forward_batch(params: MLPParams, x: np.ndarray) -> _ForwardCache:
    """Raw head outputs for a (B, 32) input batch, keeping activations."""
    z1 = x @ params.w1 + params.b1
    h1 = _act(params, z1)
    z2 = h1 @ params.w2 + params.b2
    h2 = _act(params, z2)
    return _ForwardCache(
        x=x,
        z1=z1,
        h1=h1,
        z2=z2,
        h2=h2,
        y_pose=h2 @ params.w_pose + params.b_pose,
        y_scale_raw=h2 @ params.w_scale + params.b_scale,
        y_cam=h2 @ params.w_cam + params.b_cam,
    )


def state_from_outputs(
    y_pose: np.ndarray, y_scale_raw: np.ndarray, y_cam: np.ndarray
) -> tuple[PoseParams, BoneScales, Camera]:
    """Map raw head outputs to an estimation state; the root stays at the origin."""
    pose = PoseParams(
        root_orientation=y_pose[:3].copy(),
        joint_rotations=y_pose[3:].reshape(NUM_JOINTS, 3).copy(),
        root_position=np.zeros(3),
    )
    scales = BoneScales(_softplus(y_scale_raw) + SCALE_FLOOR)
    camera = Camera(float(y_cam[0]), float(y_cam[1]), float(y_cam[2]))
    return pose, scales, camera


def forward(params: MLPParams, x: np.ndarray) -> tuple[PoseParams, BoneScales, Camera]:
    """Single-sample inference; deterministic and allocation-bounded."""
    x = np.asarray(x, dtype=float)
    if x.shape != (INPUT_DIM,):
        raise ValidationError(f"input must have shape ({INPUT_DIM},)")
    cache = forward_batch(params, x[None, :])
    return state_from_outputs(cache.y_pose[0], cache.y_scale_raw[0], cache.y_cam[0])


def backward_batch(
    params: MLPParams,
    cache: _ForwardCache,
    g_pose: np.ndarray,
    g_scale_raw: np.ndarray,
    g_cam: np.ndarray,
) -> dict[str, np.ndarray]:
    """Weight gradients from per-sample head-output gradients."""
    grads: dict[str, np.ndarray] = {}
    h2, h1 = cache.h2, cache.h1
    grads["w_pose"] = h2.T @ g_pose
    grads["b_pose"] = g_pose.sum(axis=0)
    grads["w_scale"] = h2.T @ g_scale_raw
    grads["b_scale"] = g_scale_raw.sum(axis=0)
    grads["w_cam"] = h2.T @ g_cam
    grads["b_cam"] = g_cam.sum(axis=0)

    d_h2 = g_pose @ params.w_pose.T + g_scale_raw @ params.w_scale.T + g_cam @ params.w_cam.T
    d_z2 = d_h2 * _act_grad(params, cache.z2)
    grads["w2"] = h1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_h1 = d_z2 @ params.w2.T
    d_z1 = d_h1 * _act_grad(params, cache.z1)
    grads["w1"] = cache.x.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _sample_inputs_targets(
    samples: list[DatasetSample],
) -> tuple[np.ndarray, list[FitTargets]]:
    xs = np.stack(
        [normalize_joints(s.joints2d_perturbed, s.labels) for s in samples]
    )
    targets = []
    for s in samples:
        targets.append(
            FitTargets(
                gt2d=s.joints2d_perturbed,
                gt3d=s.joints3d,
                gt_pose=s.pose_params,
                gt_scales=s.bone_scales,
                gt_camera_scale=s.camera.scale,
                joint_mask=s.included_mask(),
            )
        )
    return xs, targets


def _batch_loss_and_head_grads(
    cache: _ForwardCache,
    targets: list[FitTargets],
    weights: LossWeights,
    mode: str,
    want_gradient: bool,
):
    """Mean objective over the batch plus gradients at the raw head outputs."""
    topology = canonical_topology()
    b = cache.y_pose.shape[0]
    g_pose = np.zeros_like(cache.y_pose) if want_gradient else None
    g_scale_raw = np.zeros_like(cache.y_scale_raw) if want_gradient else None
    g_cam = np.zeros_like(cache.y_cam) if want_gradient else None
    total = 0.0
    for i in range(b):
        state = state_from_outputs(
            cache.y_pose[i], cache.y_scale_raw[i], cache.y_cam[i]
        )
        breakdown = total_loss(
            state, targets[i], weights, topology, mode, want_gradient=want_gradient
        )
        total += breakdown.total
        if want_gradient:
            g = breakdown.gradient
            g_pose[i, :3] = g[ROOT_ORIENT]
            g_pose[i, 3:] = g[JOINT_ROT]
            g_scale_raw[i] = g[SCALES] * _sigmoid(cache.y_scale_raw[i])
            g_cam[i] = g[CAMERA]
    mean = total / b
    if want_gradient:
        g_pose /= b
        g_scale_raw /= b
        g_cam /= b
    return mean, g_pose, g_scale_raw, g_cam


def train(
    samples: list[DatasetSample], config: TrainConfig | None = None
) -> tuple[MLPParams, list[dict]]:
    """Mini-batch first-order training of the objective through FK and projection.

    Deterministic for a fixed seed on a single thread.  If the training loss
    ever goes non-finite, the last end-of-epoch parameters are returned with
    the history collected so far.
    """
    config = config or TrainConfig()
    config.validate()
    if len(samples) < 100:
        raise ValidationError("training needs at least 100 samples")

    xs, targets = _sample_inputs_targets(samples)
    n = len(samples)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * config.val_split)))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]

    params = init_params(seed=config.seed)
    m_state = {f: np.zeros_like(getattr(params, f)) for f in _FIELDS}
    v_state = {f: np.zeros_like(getattr(params, f)) for f in _FIELDS}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    step = 0

    history: list[dict] = []
    snapshot = params.copy()
    for epoch in range(config.epochs):
        if epoch in config.decay_epochs:
            lr *= config.decay_factor
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        n_batches = 0
        diverged = False
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            cache = forward_batch(params, xs[idx])
            batch_targets = [targets[i] for i in idx]
            loss, g_pose, g_scale_raw, g_cam = _batch_loss_and_head_grads(
                cache, batch_targets, config.weights, config.mode, True
            )
            if not np.isfinite(loss):
                diverged = True
                break
            grads = backward_batch(params, cache, g_pose, g_scale_raw, g_cam)
            step += 1
            for f in _FIELDS:
                g = grads[f]
                m_state[f] = beta1 * m_state[f] + (1.0 - beta1) * g
                v_state[f] = beta2 * v_state[f] + (1.0 - beta2) * g * g
                m_hat = m_state[f] / (1.0 - beta1**step)
                v_hat = v_state[f] / (1.0 - beta2**step)
                setattr(
                    params,
                    f,
                    getattr(params, f) - lr * m_hat / (np.sqrt(v_hat) + eps),
                )
            epoch_loss += loss
            n_batches += 1
        if diverged:
            params = snapshot
            break

        val_cache = forward_batch(params, xs[val_idx])
        val_loss, _, _, _ = _batch_loss_and_head_grads(
            val_cache,
            [targets[i] for i in val_idx],
            config.weights,
            config.mode,
            False,
        )
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": val_loss,
            }
        )
        snapshot = params.copy()
    return params, history


def infer_sample(
    params: MLPParams, sample: DatasetSample
) -> tuple[PoseParams, BoneScales, Camera]:
    """Predict the estimation state for one dataset sample."""
    return forward(params, normalize_joints(sample.joints2d_perturbed, sample.labels))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def backprop_check(
    params: MLPParams,
    sample: DatasetSample,
    h: float = 1e-5,
    fraction: float = 0.01,
    seed: int = 0,
    weights: LossWeights | None = None,
    mode: str = "cosine",
) -> dict:
    """Backprop vs central differences on a random subset of weight entries.

    ``h`` must lie in (1e-8, 1e-3).  Relative errors use a 1e-4 denominator
    floor to absorb finite-difference round-off on near-zero gradients.
    """
    if not (1e-8 < h < 1e-3):
        raise ValidationError("finite-difference step h must lie in (1e-8, 1e-3)")
    weights = weights or LossWeights()
    x = normalize_joints(sample.joints2d_perturbed, sample.labels)[None, :]
    targets = [
        FitTargets(
            gt2d=sample.joints2d_perturbed,
            gt3d=sample.joints3d,
            gt_pose=sample.pose_params,
            gt_scales=sample.bone_scales,
            gt_camera_scale=sample.camera.scale,
            joint_mask=sample.included_mask(),
        )
    ]

    cache = forward_batch(params, x)
    _, g_pose, g_scale_raw, g_cam = _batch_loss_and_head_grads(
        cache, targets, weights, mode, True
    )
    grads = backward_batch(params, cache, g_pose, g_scale_raw, g_cam)

    def loss_at(p: MLPParams) -> float:
        c = forward_batch(p, x)
        value, _, _, _ = _batch_loss_and_head_grads(c, targets, weights, mode, False)
        return value

    sizes = [getattr(params, f).size for f in _FIELDS]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    rng = np.random.default_rng(seed)
    n_check = max(1, int(round(fraction * total)))
    chosen = rng.choice(total, size=n_check, replace=False)

    analytic = np.empty(n_check)
    numeric = np.empty(n_check)
    for out_i, flat_i in enumerate(sorted(chosen)):
        f_idx = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        f = _FIELDS[f_idx]
        local = flat_i - offsets[f_idx]
        analytic[out_i] = grads[f].reshape(-1)[local]

        p_hi = params.copy()
        arr = p_hi.__dict__[f].reshape(-1)
        arr[local] += h
        up = loss_at(p_hi)
        p_lo = params.copy()
        arr = p_lo.__dict__[f].reshape(-1)
        arr[local] -= h
        down = loss_at(p_lo)
        numeric[out_i] = (up - down) / (2.0 * h)

    from .losses import relative_errors

    rel = relative_errors(analytic, numeric)
    return {
        "n_checked": n_check,
        "h": h,
        "max_rel_err": float(rel.max()),
        "mean_rel_err": float(rel.mean()),
    }


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: MLPParams) -> None:
    """Versioned binary checkpoint: magic, version, activation, dims, float64 LE."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, _ACTIVATIONS.index(params.activation)))
        fh.write(struct.pack("<I", len(_FIELDS)))
        for f in _FIELDS:
            arr = np.ascontiguousarray(getattr(params, f), dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> MLPParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValidationError("not a regressor checkpoint (bad magic)")
    version, act_code = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    (n_arrays,) = struct.unpack_from("<I", raw, 12)
    if n_arrays != len(_FIELDS):
        raise ValidationError("checkpoint layer count mismatch")
    pos = 16
    arrays = {}
    for f in _FIELDS:
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(
            np.float64
        )
        pos += 8 * count
        arrays[f] = arr.reshape(shape)
    return MLPParams(**arrays, activation=_ACTIVATIONS[act_code])
