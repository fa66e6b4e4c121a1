"""Evaluation metrics and runtime benchmarking.

MPJPE is the mean per-joint Euclidean distance in millimeters after
root-centering both poses at the hip midpoint.  PA-MPJPE first aligns the
prediction to the ground truth with the closed-form least-squares
similarity transform (rotation from the SVD of the cross-covariance,
optimal uniform scale and translation, reflections disallowed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .skeleton import L_HIP, R_HIP, Pose3D, ValidationError

MM_PER_M = 1000.0


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


@dataclass
class EvalReport:
    """Aggregate pose-error report with optional timing statistics."""

    mpjpe_mm: float
    pa_mpjpe_mm: float
    per_sample_mpjpe_mm: list[float]
    per_sample_pa_mpjpe_mm: list[float]
    timing: dict | None = None

    def to_dict(self) -> dict:
        return {
            "mpjpe_mm": self.mpjpe_mm,
            "pa_mpjpe_mm": self.pa_mpjpe_mm,
            # Mesh-vertex error is undefined for a stick skeleton.
            "mpve_mm": None,
            "per_sample_mpjpe_mm": self.per_sample_mpjpe_mm,
            "per_sample_pa_mpjpe_mm": self.per_sample_pa_mpjpe_mm,
            "timing": self.timing,
        }


def _root_centered(joints: np.ndarray) -> np.ndarray:
    root = 0.5 * (joints[L_HIP] + joints[R_HIP])
    return joints - root


def mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    """Mean joint distance in millimeters after hip-midpoint centering."""
    p = _root_centered(pred.joints)
    g = _root_centered(gt.joints)
    return float(np.mean(np.linalg.norm(p - g, axis=1)) * MM_PER_M)


def procrustes_align(
    pred: Pose3D, gt: Pose3D
) -> tuple[SimilarityTransform, Pose3D]:
    """Best-fit similarity transform taking the prediction onto the ground truth.

    Minimizes the sum of squared joint distances over rotation (det +1),
    uniform scale, and translation.  Rank-deficient predictions fall back to
    translation plus scale only, flagged on the returned transform.
    """
    x = pred.joints
    y = gt.joints
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    var_x = float(np.sum(xc * xc))
    if float(np.sum(yc * yc)) <= 0.0:
        raise ValidationError("ground-truth joints are all coincident")

    cov = yc.T @ xc
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    if sign == 0.0:
        sign = 1.0
    s3 = np.ones(3)
    s3[-1] = sign

    degenerate = var_x <= 0.0 or np.linalg.matrix_rank(cov) < 2
    if degenerate:
        rotation = np.eye(3)
        scale = 1.0 if var_x <= 0.0 else float(
            np.sqrt(np.sum(yc * yc) / var_x)
        )
    else:
        rotation = u @ np.diag(s3) @ vt
        scale = float(np.sum(d * s3) / var_x)

    translation = mu_y - scale * rotation @ mu_x
    transform = SimilarityTransform(scale, rotation, translation, degenerate)
    aligned = Pose3D(transform.apply(x))
    return transform, aligned


def pa_mpjpe(pred: Pose3D, gt: Pose3D) -> float:
    """Mean joint distance in millimeters after Procrustes alignment."""
    _, aligned = procrustes_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned.joints - gt.joints, axis=1)) * MM_PER_M)


def evaluate(preds: list[Pose3D], gts: list[Pose3D]) -> EvalReport:
    """Per-sample and mean MPJPE / PA-MPJPE over paired pose lists."""
    if len(preds) != len(gts) or not preds:
        raise ValidationError("evaluate needs equally many predictions and truths")
    per_m = [mpjpe(p, g) for p, g in zip(preds, gts)]
    per_pa = [pa_mpjpe(p, g) for p, g in zip(preds, gts)]
    return EvalReport(
        mpjpe_mm=float(np.mean(per_m)),
        pa_mpjpe_mm=float(np.mean(per_pa)),
        per_sample_mpjpe_mm=per_m,
        per_sample_pa_mpjpe_mm=per_pa,
    )


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------


def _time_method(fn, inputs, repetitions: int) -> dict:
    """Median/p95 per-call seconds over identical inputs, warmup excluded."""
    fn(inputs[0])  # warmup
    rep_medians = []
    all_times: list[float] = []
    for _ in range(repetitions):
        times = []
        for item in inputs:
            start = time.perf_counter()
            fn(item)
            times.append(time.perf_counter() - start)
        rep_medians.append(float(np.median(times)))
        all_times.extend(times)
    return {
        "median_s": float(np.median(rep_medians)),
        "rep_medians_s": rep_medians,
        "p95_s": float(np.percentile(all_times, 95)),
        "calls": len(all_times),
    }


def bench(methods: dict, samples: list, repetitions: int = 3) -> dict:
    """Wall-clock comparison of per-sample callables on identical inputs.

    ``methods`` maps a name to a callable taking one sample.  Runs
    single-threaded; the first call per method is warmup and excluded.  When
    both a "fitter" and a "regressor" entry are present, the report carries
    their median-runtime ratio.
    """
    if len(samples) < 20:
        raise ValidationError("bench needs at least 20 samples")
    if repetitions < 3:
        raise ValidationError("bench needs at least 3 repetitions")
    report: dict = {"repetitions": repetitions, "n_samples": len(samples), "methods": {}}
    for name, fn in methods.items():
        report["methods"][name] = _time_method(fn, samples, repetitions)
    if "fitter" in report["methods"] and "regressor" in report["methods"]:
        per_rep = [
            f / r
            for f, r in zip(
                report["methods"]["fitter"]["rep_medians_s"],
                report["methods"]["regressor"]["rep_medians_s"],
            )
        ]
        report["speedup_fitter_over_regressor"] = float(np.median(per_rep))
    return report
