"""Command line entry points: odometry, classify, synth, eval, plot."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .evaluation import eval_classification, eval_odometry_kitti, motion_labels
from .exceptions import ConfigError, IoError, PSFLOError, TooShort
from .extraction import PSFExtractor, write_psf_outlines_csv
from .gef import GeFExtractor
from .io import KittiSequence, TaxonomyMap, ensure_dir, read_calib_kitti, read_poses_kitti, write_motion_labels
from .odometry import PSFLidarOdometry, write_manifest
from .plotting import emit_trajectory_plot
from .psf_matching import PSFMatcher
from .synthetic import corridor_scene, scene_from_spec, write_dataset
from .tracking import DynamicObjectClassifier, write_classification_csv

logger = logging.getLogger("psflo")

COMPONENTS = {
    "gef_extractor": GeFExtractor,
    "psf_extractor": PSFExtractor,
    "psf_matcher": PSFMatcher,
    "classifier": DynamicObjectClassifier,
}
TOP_LEVEL = "odometry"


# --------------------------------------------------------------------------
# config


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def flatten_config(tree: dict, prefix: str = "") -> dict:
    """Nested mapping -> ``{"a__b": value}``; the ``odometry`` section maps to top-level keys."""
    flat = {}
    for key, value in (tree or {}).items():
        key = str(key)
        name = "" if (not prefix and key == TOP_LEVEL) else f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_config(value, f"{name}__" if name else ""))
        else:
            flat[name] = _tuplify(value)
    return flat


def parse_override(text: str) -> tuple:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not key=value")
    return key.strip(), _tuplify(yaml.safe_load(raw))


def load_config(path=None, overrides: Sequence[str] = ()) -> dict:
    tree = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    flat = flatten_config(tree)
    flat.update(parse_override(o) for o in overrides)
    return flat


def make_odometry(config: dict) -> PSFLidarOdometry:
    """Odometry estimator with the given flat ``component__param`` config applied."""
    comps = {name: cls() for name, cls in COMPONENTS.items() if any(k.startswith(f"{name}__") for k in config)}
    est = PSFLidarOdometry(**comps)
    try:
        est.set_params(**config)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return est


def make_classifier(config: dict) -> DynamicObjectClassifier:
    params = {k.split("__", 1)[1]: v for k, v in config.items() if k.startswith("classifier__")}
    try:
        return DynamicObjectClassifier().set_params(**params)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def _sequence(args) -> KittiSequence:
    taxonomy = TaxonomyMap.from_file(args.taxonomy) if args.taxonomy else None
    return KittiSequence(args.dataset, args.sequence, taxonomy)


def _frames(seq: KittiSequence, max_frames: Optional[int]):
    n = len(seq) if max_frames is None else min(len(seq), max_frames)
    return (seq.frame(i) for i in range(n)), n


def _write_report(report, stem) -> None:
    report.write(stem)
    sys.stdout.write(report.to_text())


def cmd_odometry(args) -> int:
    config = load_config(args.config, args.set)
    est = make_odometry(config)
    seq = _sequence(args)
    frames, n = _frames(seq, args.max_frames)
    out = ensure_dir(args.out)
    est.fit(frames)
    extra = {"dataset": str(seq.path), "frames": n, "config_file": args.config}
    est.write_outputs(out, calib=seq.calib, debug=args.debug, extra_manifest=extra)
    if args.debug:
        write_psf_outlines_csv([est.psf_.extract_frame(seq.frame(i)) for i in range(n)], out / "psf_outlines.csv")
    if est.classify_objects:
        ensure_dir(out / "motion")
        for i, labels in enumerate(est.finalize_labels()):
            write_motion_labels(labels, out / "motion" / f"{i:06d}.label")
    gt = seq.ground_truth()
    if gt is None:
        logger.info("no ground truth poses; skipping the error report")
        return 0
    try:
        _write_report(eval_odometry_kitti(est.poses_, gt[:n]), out / "odometry_report")
    except TooShort as exc:
        sys.stderr.write(f"warning: no error report: {exc}\n")
    return 0


def cmd_classify(args) -> int:
    config = load_config(args.config, args.set)
    clf = make_classifier(config)
    seq = _sequence(args)
    if args.poses:
        calib = read_calib_kitti(args.calib) if args.calib else seq.calib
        poses = read_poses_kitti(args.poses, calib=calib)
    else:
        poses = seq.ground_truth()
    if poses is None:
        raise ConfigError("no poses: pass --poses or provide poses.txt with the sequence")
    n = min(len(seq), len(poses)) if args.max_frames is None else min(len(seq), len(poses), args.max_frames)
    clouds = [seq.frame(i) for i in range(n)]
    pred = clf.predict(clouds, poses[:n])
    out = ensure_dir(args.out)
    ensure_dir(out / "motion")
    for i, labels in enumerate(pred):
        write_motion_labels(labels, out / "motion" / f"{i:06d}.label")
    write_classification_csv(clf.rows_, out / "classification.csv")
    write_manifest(out / "manifest.json", clf, {"dataset": str(seq.path), "frames": n})
    if seq.has_labels():
        _write_report(eval_classification(pred, [motion_labels(c, seq.taxonomy) for c in clouds]),
                      out / "classification_report")
    return 0


def cmd_synth(args) -> int:
    if args.spec:
        try:
            spec = yaml.safe_load(Path(args.spec).read_text()) or {}
        except OSError as exc:
            raise IoError(f"cannot read scene spec {args.spec}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from exc
        try:
            scene = scene_from_spec(spec)
        except TypeError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from exc
    else:
        scene = corridor_scene(n_frames=args.frames, seed=args.seed)
    seq = write_dataset(scene, args.out, args.sequence)
    sys.stdout.write(f"wrote {len(scene)} frames to {seq}\n")
    return 0


def cmd_eval(args) -> int:
    calib = read_calib_kitti(args.calib) if args.calib else None
    est = read_poses_kitti(args.est, calib=calib)
    gt = read_poses_kitti(args.gt, calib=calib)
    _write_report(eval_odometry_kitti(est, gt, step=args.step), args.out)
    return 0


def cmd_plot(args) -> int:
    calib = read_calib_kitti(args.calib) if args.calib else None
    poses = read_poses_kitti(args.poses, calib=calib)
    gt = read_poses_kitti(args.gt, calib=calib) if args.gt else None
    csv_path, svg_path = emit_trajectory_plot(poses, args.out, gt, args.outlines)
    sys.stdout.write(f"wrote {csv_path} and {svg_path}\n")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psflo", description="Semantic lidar odometry toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def dataset_args(p):
        p.add_argument("--dataset", required=True, help="KITTI root or sequence directory")
        p.add_argument("--sequence", default="00")
        p.add_argument("--taxonomy", help="class id -> role file (default: SemanticKITTI map)")
        p.add_argument("--config", help="YAML config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. psf_gain=0 or psf_extractor__line_threshold=0.2")
        p.add_argument("--max-frames", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("odometry", help="estimate poses for a sequence")
    dataset_args(p)
    p.add_argument("--debug", action="store_true", help="also write solver history and PSF outlines")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("classify", help="label object points static or dynamic")
    dataset_args(p)
    p.add_argument("--poses", help="KITTI pose file (default: the sequence's ground truth)")
    p.add_argument("--calib", help="calib.txt for --poses")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("synth", help="write a synthetic sequence in KITTI layout")
    p.add_argument("--spec", help="YAML scene spec (default: corridor preset)")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequence", default="00")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="segment errors of estimated vs ground-truth poses")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--calib")
    p.add_argument("--step", type=int, default=10, help="frames between segment starts")
    p.add_argument("--out", required=True, help="report stem; writes .txt and .kv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="trajectory CSV and SVG")
    p.add_argument("--poses", required=True)
    p.add_argument("--gt")
    p.add_argument("--calib")
    p.add_argument("--outlines", help="PSF outline CSV from 'odometry --debug'")
    p.add_argument("--out", required=True, help="output stem; writes .csv and .svg")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PSFLOError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
