"""Command-line interface: dataset synthesis, fitting, training, evaluation.

Subcommands: synth, fit, train, infer, eval, bench, render, and
``losses check-grad``.  Settings merge from an optional ``key = value``
config file and command-line flags (flags win); the SKETCHPOSE_SEED
environment variable overrides a config-file seed but not an explicit
``--seed`` flag.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 data error (malformed input lines are reported with their line number).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import losses as losses_mod
from . import metrics as metrics_mod
from . import regressor as regressor_mod
from .fitter import FitConfig, fit_sample, targets_from_sample
from .heatmap import DEFAULT_SIGMA, write_heatmap_file
from .losses import LossWeights, check_gradients, pack_state, unpack_state
from .projection import FRAME_HEIGHT, FRAME_WIDTH, Camera, Pose2D
from .skeleton import (
    BONE_SIDES,
    JOINT_NAMES,
    NUM_JOINTS,
    PROPORTION_TABLE,
    BoneScales,
    Pose3D,
    PoseParams,
    ValidationError,
    canonical_topology,
    forward_kinematics,
)
from .synth import (
    DataFormatError,
    DatasetSample,
    JointLabel,
    SamplerConfig,
    sample_heatmap,
    iter_dataset,
    synth_dataset,
    sample_from_dict,
    sample_to_dict,
)

ENV_SEED = "SKETCHPOSE_SEED"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(parser: argparse.ArgumentParser, key: str, value: str):
    for action in parser._actions:  # noqa: SLF001 - argparse offers no public view
        if action.dest == key:
            if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
                low = value.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
            if action.type is not None:
                try:
                    return action.type(value)
                except ValueError as exc:
                    raise UsageError(f"config key {key!r}: {exc}") from exc
            return value
    raise UsageError(f"unknown config key {key!r}")


def _apply_config_and_env(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Set config-file values and the env seed as parser defaults, then parse.

    Explicit flags always win because they override defaults; the env seed
    overrides a config-file seed by being applied afterwards.
    """
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        raw = parse_config_file(known.config)
        defaults = {k: _coerce(parser, k, v) for k, v in raw.items()}
        parser.set_defaults(**defaults)
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None and any(a.dest == "seed" for a in parser._actions):  # noqa: SLF001
        try:
            parser.set_defaults(seed=int(env_seed))
        except ValueError as exc:
            raise UsageError(f"{ENV_SEED} must be an integer") from exc
    return parser.parse_args(argv)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=0, help="global seed")


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

_SIDE_COLORS = {"l": "#d9534f", "r": "#0275d8", "c": "#5a5a5a"}


def render_svg(
    joints2d: np.ndarray,
    labels: list[JointLabel] | None = None,
    bbox: tuple[float, float, float, float] | None = None,
    frame: tuple[int, int] = (FRAME_WIDTH, FRAME_HEIGHT),
) -> str:
    """Deterministic stick-figure SVG.

    Bones are strokes colored by body side, joints are circles (dashed
    outline when invisible), the bbox an outlined rectangle.  Not-included
    joints and their incident bones are omitted.
    """
    topology = canonical_topology()
    w, h = frame
    if labels is None:
        labels = [JointLabel.VISIBLE] * NUM_JOINTS
    included = [lab is not JointLabel.NOT_INCLUDED for lab in labels]

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
    ]
    if bbox is not None:
        x, y, bw, bh = bbox
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bw:.2f}" height="{bh:.2f}" '
            'fill="none" stroke="#999999" stroke-width="1"/>'
        )
    for i, (p, c) in enumerate(topology.bones):
        if not (included[p] and included[c]):
            continue
        color = _SIDE_COLORS[BONE_SIDES[i]]
        x1, y1 = joints2d[p]
        x2, y2 = joints2d[c]
        parts.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
    for j in range(NUM_JOINTS):
        if not included[j]:
            continue
        x, y = joints2d[j]
        if labels[j] is JointLabel.INVISIBLE:
            parts.append(
                f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="none" '
                'stroke="#222222" stroke-width="1" stroke-dasharray="2,2"/>'
            )
        else:
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#222222"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Prediction record helpers
# ---------------------------------------------------------------------------


def _state_to_dict(pose: PoseParams, scales: BoneScales, camera: Camera) -> dict:
    return {
        "pose_params": {
            "root_orientation": pose.root_orientation.tolist(),
            "root_position": pose.root_position.tolist(),
            "joint_rotations": pose.joint_rotations.tolist(),
        },
        "bone_scales": scales.scales.tolist(),
        "camera": {
            "scale": float(camera.scale),
            "tx": float(camera.tx),
            "ty": float(camera.ty),
        },
    }


def _state_from_dict(d: dict) -> tuple[PoseParams, BoneScales, Camera]:
    pose = PoseParams(
        root_orientation=np.asarray(d["pose_params"]["root_orientation"], float),
        joint_rotations=np.asarray(d["pose_params"]["joint_rotations"], float),
        root_position=np.asarray(d["pose_params"]["root_position"], float),
    )
    scales = BoneScales(np.asarray(d["bone_scales"], float))
    cam = Camera(
        float(d["camera"]["scale"]), float(d["camera"]["tx"]), float(d["camera"]["ty"])
    )
    return pose, scales, cam


def _iter_prediction_lines(path: str):
    """Yield (id, state-dict) records from fit/infer output or a dataset file."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(lineno, str(exc)) from exc
            if "header" in record:
                continue
            try:
                yield int(record["id"]), record
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(lineno, f"bad prediction record: {exc}") from exc


def _header(command: str, args: argparse.Namespace, skip=("config",)) -> dict:
    settings = {
        k: v for k, v in sorted(vars(args).items()) if k not in skip and k != "command"
    }
    return {"command": command, "settings": settings}


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_export_proportions(args) -> int:
    table = {
        "proportions_m": PROPORTION_TABLE,
        "standing_height_m": 1.70,
        "joint_names": list(JOINT_NAMES),
        "bones": [list(b) for b in canonical_topology().bones],
        "rest_offsets_m": canonical_topology().rest_offsets.tolist(),
    }
    text = json.dumps(table, indent=2) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    config = SamplerConfig(bias_range=args.bias_range, scale_jitter=args.scale_jitter)
    config.validate()
    n = args.n if args.n is not None else config.count
    heatmaps = []
    count = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for sample in synth_dataset(config, n, args.seed):
            fh.write(json.dumps(sample_to_dict(sample)) + "\n")
            if args.heatmaps:
                heatmaps.append(sample_heatmap(sample, sigma=args.sigma))
            count += 1
    if args.heatmaps:
        write_heatmap_file(args.out + ".heatmaps.bin", heatmaps)
    print(f"wrote {count} samples (seed {args.seed}) to {args.out}")
    return EXIT_OK


def _fit_config_from_args(args) -> FitConfig:
    return FitConfig(
        max_iters=args.max_iters,
        learning_rate=args.learning_rate,
        tol=args.tol,
        restarts=args.restarts,
        weights=LossWeights(
            parallel=args.w_parallel,
            foreshorten=args.w_foreshorten,
            pose=args.w_pose,
            shape=args.w_shape,
        ),
        mode=args.mode,
        use_3d_supervision=not args.no_3d,
        seed=args.seed,
    )


def cmd_fit(args) -> int:
    config = _fit_config_from_args(args)
    config.validate()
    results = []
    for i, sample in enumerate(iter_dataset(args.data)):
        if args.limit is not None and i >= args.limit:
            break
        result = fit_sample(sample, config)
        results.append((sample.id, result))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": _header("fit", args)}) + "\n")
        for sid, res in results:
            record = {"id": sid}
            record.update(_state_to_dict(res.pose, res.scales, res.camera))
            record.update(
                {
                    "total": res.breakdown.total,
                    "parallel": res.breakdown.parallel,
                    "foreshortening": res.breakdown.foreshortening,
                    "pose_term": res.breakdown.pose,
                    "shape_term": res.breakdown.shape,
                    "iterations": res.iterations,
                    "converged": res.converged,
                    "best_restart": res.best_restart,
                }
            )
            fh.write(json.dumps(record) + "\n")
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write("sample_id,restart,iteration,total\n")
            for sid, res in results:
                for r, trace in enumerate(res.traces):
                    for it, value in enumerate(trace):
                        fh.write(f"{sid},{r},{it},{value!r}\n")
    print(f"fit {len(results)} samples -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    samples = list(iter_dataset(args.data))
    config = regressor_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        val_split=args.val_split,
    )
    params, history = regressor_mod.train(samples, config)
    regressor_mod.save_checkpoint(args.out, params)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            json.dump({"header": _header("train", args), "history": history}, fh)
            fh.write("\n")
    final = history[-1] if history else {}
    print(
        f"trained on {len(samples)} samples, {len(history)} epochs, "
        f"final val loss {final.get('val_loss', float('nan')):.6f} -> {args.out}"
    )
    return EXIT_OK


def cmd_infer(args) -> int:
    params = regressor_mod.load_checkpoint(args.checkpoint)
    count = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": _header("infer", args)}) + "\n")
        for sample in iter_dataset(args.data):
            pose, scales, camera = regressor_mod.infer_sample(params, sample)
            record = {"id": sample.id}
            record.update(_state_to_dict(pose, scales, camera))
            fh.write(json.dumps(record) + "\n")
            count += 1
    print(f"inferred {count} samples -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    topology = canonical_topology()
    gt = {s.id: s for s in iter_dataset(args.data)}
    preds, gts = [], []
    for sid, record in _iter_prediction_lines(args.pred):
        if sid not in gt:
            continue
        pose, scales, _ = _state_from_dict(record)
        preds.append(forward_kinematics(topology, pose, scales))
        gts.append(gt[sid].joints3d)
    if not preds:
        raise DataFormatError(1, "no prediction records matched the dataset ids")
    report = metrics_mod.evaluate(preds, gts)
    payload = {"header": _header("eval", args), "report": report.to_dict()}
    text = json.dumps(payload) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(f"eval: MPJPE {report.mpjpe_mm:.3f} mm, PA-MPJPE {report.pa_mpjpe_mm:.3f} mm")
    return EXIT_OK


def cmd_bench(args) -> int:
    samples = []
    for i, sample in enumerate(iter_dataset(args.data)):
        if i >= args.n:
            break
        samples.append(sample)
    params = regressor_mod.load_checkpoint(args.checkpoint)
    config = FitConfig(seed=args.seed)

    methods = {
        "fitter": lambda s: fit_sample(s, config),
        "regressor": lambda s: regressor_mod.infer_sample(params, s),
    }
    report = metrics_mod.bench(methods, samples, repetitions=args.reps)
    payload = {"header": _header("bench", args), "report": report}
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload) + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("method,median_s,p95_s,calls\n")
            for name, stats in report["methods"].items():
                fh.write(
                    f"{name},{stats['median_s']!r},{stats['p95_s']!r},{stats['calls']}\n"
                )
    ratio = report.get("speedup_fitter_over_regressor")
    print(f"bench: speedup fitter/regressor = {ratio:.1f}x -> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    sample = None
    for i, s in enumerate(iter_dataset(args.data)):
        if i == args.index:
            sample = s
            break
    if sample is None:
        raise DataFormatError(args.index + 1, f"no sample at index {args.index}")
    joints = (
        sample.joints2d_clean.joints
        if args.use == "clean"
        else sample.joints2d_perturbed.joints
    )
    svg = render_svg(joints, sample.labels, sample.bbox)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"rendered sample {sample.id} -> {args.out}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    rng = np.random.default_rng(args.seed)
    pose = PoseParams(
        root_orientation=rng.uniform(-1.0, 1.0, 3),
        joint_rotations=rng.uniform(-0.8, 0.8, (NUM_JOINTS, 3)),
        root_position=rng.uniform(-0.2, 0.2, 3),
    )
    scales = BoneScales(rng.uniform(0.7, 1.4, 15))
    camera = Camera(float(rng.uniform(40.0, 80.0)), 96.0, 128.0)

    from .synth import make_sample

    sample = make_sample(SamplerConfig(), 0, args.seed)
    targets = targets_from_sample(sample)
    report = check_gradients(
        (pose, scales, camera), targets, LossWeights(), mode=args.mode, h=args.h
    )
    payload = json.dumps(report.to_dict()) + "\n"
    if args.out == "-":
        sys.stdout.write(payload)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    print(f"check-grad: max relative error {report.max_rel_err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sketchpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--out", required=True)
    p.add_argument("--bias-range", type=float, default=0.25)
    p.add_argument("--scale-jitter", type=float, default=0.15)
    p.add_argument("--heatmaps", action="store_true", help="write heatmap sidecar")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="optimization-based recovery from a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--mode", choices=("cosine", "as-written"), default="cosine")
    p.add_argument("--no-3d", action="store_true", help="2D terms only")
    p.add_argument("--w-parallel", type=float, default=3.0)
    p.add_argument("--w-foreshorten", type=float, default=3.0)
    p.add_argument("--w-pose", type=float, default=2.0)
    p.add_argument("--w-shape", type=float, default=1.0)
    p.add_argument("--trace", default=None, help="per-iteration loss CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the feed-forward regressor")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-split", type=float, default=0.2)
    p.add_argument("--history", default=None, help="training history JSON")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the regressor over a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="MPJPE / PA-MPJPE against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True, help="fit/infer output or dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="fitter vs regressor runtime")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="render a sample as an SVG stick figure")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--use", choices=("clean", "perturbed"), default="perturbed")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("proportions", help="export the canonical proportion table")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_export_proportions)

    p_losses = sub.add_parser("losses", help="loss utilities")
    losses_sub = p_losses.add_subparsers(dest="losses_command", required=True)
    p = losses_sub.add_parser("check-grad", help="analytic vs finite differences")
    _add_common(p)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--mode", choices=("cosine", "as-written"), default="cosine")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_check_grad)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_and_env(parser, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
