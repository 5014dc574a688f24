"""Frame-by-frame lidar odometry.

Each frame goes through GeF and PSF extraction, frame-to-frame GeF matching
(the odom pose), object classification at the odom pose, and a joint
frame-to-submap refinement over GeF and PSF residuals (the map pose). The
integrated pose is the map pose when refinement ran and succeeded, otherwise
the last integrated pose composed with the odom increment.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone

from .exceptions import IoError
from .extraction import PSFExtractor, PSFFrame
from .fitting import voxel_downsample
from .gef import (
    SURFACE,
    CorrespondenceConfig,
    GeFExtractor,
    GeFSet,
    GeFSubmap,
    build_gef_residuals,
    register_frame,
    update_submap,
)
from .geometry import Pose, compose, invert
from .io import SemanticCloud, ensure_dir, write_poses_kitti
from .psf_matching import PSFMatcher, PSFSubmap
from .solver import solve_with_reassociation, write_history_csv
from .tracking import DYNAMIC, STATIC, DynamicObjectClassifier, write_classification_csv
from .validation import check_semantic_cloud

logger = logging.getLogger(__name__)

STAGES = ("extract", "frame_to_frame", "classify", "frame_to_submap", "update")


def predict_pose(history: Sequence[Pose]) -> Pose:
    """Constant-velocity extrapolation ``T[-1] @ (inv(T[-2]) @ T[-1])``."""
    if len(history) == 0:
        raise ValueError("need at least one pose")
    if len(history) == 1:
        return history[-1]
    return compose(history[-1], compose(invert(history[-2]), history[-1]))


def integrate_pose(anchor: Pose, increments: Sequence[Pose] = (), map_pose: Optional[Pose] = None) -> Pose:
    """Map pose when available, else ``anchor`` composed with the odom increments."""
    if map_pose is not None:
        return map_pose
    pose = anchor
    for inc in increments:
        pose = compose(pose, inc)
    return pose


@dataclass
class FrameResult:
    frame_index: int
    odom_pose: Pose
    map_pose: Optional[Pose]
    pose: Pose
    counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # ms per stage
    flags: list = field(default_factory=list)
    labels: Optional[np.ndarray] = None  # per point: -1 not object, 0 static, 1 dynamic

    def row(self) -> dict:
        out = {"frame": self.frame_index}
        x, y, z = self.pose.translation
        out.update(x=f"{x:.6f}", y=f"{y:.6f}", z=f"{z:.6f}")
        out.update(self.counts)
        out.update({f"ms_{k}": f"{v:.3f}" for k, v in self.timings.items()})
        out["flags"] = ";".join(self.flags)
        return out


@dataclass
class _Features:
    sem: SemanticCloud
    corners: GeFSet
    surfaces: GeFSet
    psf_frame: PSFFrame
    ms: float


class PSFLidarOdometry(BaseEstimator):
    """Semantic lidar odometry estimator.

    ``fit(X)`` runs the whole sequence of semantic clouds and stores the
    integrated trajectory in ``poses_``; ``predict(X)`` returns it.

    Parameters
    ----------
    gef_extractor, psf_extractor, psf_matcher, classifier : estimators or None
        Components; ``None`` selects the defaults.
    psf_gain : float
        Gain on PSF residuals in the map refinement; 0 leaves GeFs only.
    classify_objects : bool
        When False every object point is treated as dynamic and dropped.
    refine_every : int
        Run the map refinement on every n-th frame.
    mode : {"sequential", "threaded"}
        Threaded mode extracts features for upcoming frames in a worker.
    queue_size : int
        Look-ahead of the extraction worker in threaded mode.
    """

    def __init__(
        self,
        gef_extractor=None,
        psf_extractor=None,
        psf_matcher=None,
        classifier=None,
        psf_gain=1.0,
        classify_objects=True,
        refine_every=1,
        frame_outer_iterations=2,
        map_outer_iterations=3,
        max_iterations=20,
        huber_delta=0.1,
        divergence_threshold=0.5,
        corner_voxel=0.2,
        surface_voxel=0.4,
        static_object_voxel=0.4,
        submap_radius=100.0,
        mode="sequential",
        queue_size=4,
        random_state=0,
    ):
        self.gef_extractor = gef_extractor
        self.psf_extractor = psf_extractor
        self.psf_matcher = psf_matcher
        self.classifier = classifier
        self.psf_gain = psf_gain
        self.classify_objects = classify_objects
        self.refine_every = refine_every
        self.frame_outer_iterations = frame_outer_iterations
        self.map_outer_iterations = map_outer_iterations
        self.max_iterations = max_iterations
        self.huber_delta = huber_delta
        self.divergence_threshold = divergence_threshold
        self.corner_voxel = corner_voxel
        self.surface_voxel = surface_voxel
        self.static_object_voxel = static_object_voxel
        self.submap_radius = submap_radius
        self.mode = mode
        self.queue_size = queue_size
        self.random_state = random_state

    # ------------------------------------------------------------------ setup

    def reset(self) -> "PSFLidarOdometry":
        if self.mode not in ("sequential", "threaded"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if int(self.refine_every) < 1:
            raise ValueError("refine_every must be >= 1")
        self.gef_ = clone(self.gef_extractor) if self.gef_extractor is not None else GeFExtractor()
        psf = clone(self.psf_extractor) if self.psf_extractor is not None else PSFExtractor()
        self.psf_ = psf.set_params(random_state=self.random_state).fit()
        matcher = clone(self.psf_matcher) if self.psf_matcher is not None else PSFMatcher()
        self.matcher_ = matcher.set_params(psf_gain=self.psf_gain)
        clf = clone(self.classifier) if self.classifier is not None else DynamicObjectClassifier()
        self.classifier_ = clf.reset()
        self.cfg_ = CorrespondenceConfig()
        self.gef_submap_: Optional[GeFSubmap] = None
        self.psf_submap_: Optional[PSFSubmap] = None
        self.results_: list = []
        self.poses_: list = []
        self.history_: list = []
        self._prev_features: Optional[_Features] = None
        self._anchor: Optional[Pose] = None  # last map pose
        self._since_anchor: list = []  # odom increments since the anchor
        return self

    def _lm(self) -> dict:
        return dict(max_iterations=self.max_iterations, huber_delta=self.huber_delta,
                    divergence_threshold=self.divergence_threshold)

    # ------------------------------------------------------------------ stages

    def extract(self, sem: SemanticCloud) -> _Features:
        t0 = time.perf_counter()
        sem = check_semantic_cloud(sem)
        corners, surfaces = self.gef_.extract(sem, exclude=sem.mask("object"))
        psf_frame = self.psf_.extract_frame(sem)
        return _Features(sem, corners, surfaces, psf_frame, 1e3 * (time.perf_counter() - t0))

    def _static_surfaces(self, sem: SemanticCloud, labels: np.ndarray) -> GeFSet:
        idx = np.flatnonzero(labels == STATIC)
        if len(idx) == 0:
            return GeFSet.empty(SURFACE)
        if self.static_object_voxel:
            _, idx = voxel_downsample(sem.xyz[idx], self.static_object_voxel, idx)
        return GeFSet(SURFACE, sem.xyz[idx], np.zeros(len(idx)), sem.class_id[idx].astype(np.int64))

    def process_features(self, feat: _Features) -> FrameResult:
        if not hasattr(self, "results_"):
            self.reset()
        sem = feat.sem
        timings = {"extract": feat.ms}
        flags: list = []
        index = len(self.results_)

        # frame-to-frame
        t0 = time.perf_counter()
        if self._prev_features is None:
            increment = Pose.identity()
        else:
            guess = compose(invert(self.poses_[-2]), self.poses_[-1]) if len(self.poses_) >= 2 else Pose.identity()
            prev = self._prev_features
            res = register_frame(
                feat.corners, feat.surfaces, GeFSubmap(prev.corners, prev.surfaces), guess, self.cfg_,
                outer_iterations=self.frame_outer_iterations, **self._lm(),
            )
            self.history_ += [dict(row, frame=index, stage="frame_to_frame") for row in res.history]
            if res.ok:
                increment = res.pose
            else:
                increment = guess
                flags.append("odom_degenerate" if res.degenerate else "odom_diverged")
        last = self.poses_[-1] if self.poses_ else Pose.identity()
        odom_pose = compose(last, increment)
        timings["frame_to_frame"] = 1e3 * (time.perf_counter() - t0)

        # classification at the odom pose
        t0 = time.perf_counter()
        if self.classify_objects:
            labels = self.classifier_.update(sem, odom_pose).labels
        else:
            labels = np.where(sem.mask("object"), DYNAMIC, -1).astype(np.int8)
        static = self._static_surfaces(sem, labels)
        timings["classify"] = 1e3 * (time.perf_counter() - t0)

        # frame-to-submap
        t0 = time.perf_counter()
        map_pose = None
        surfaces = feat.surfaces.concat(static)
        refine = index > 0 and index % int(self.refine_every) == 0 and self.gef_submap_ is not None
        if refine:
            psf_submap = self.psf_submap_

            def build(pose):
                blocks = build_gef_residuals(feat.corners, surfaces, self.gef_submap_, pose, self.cfg_)
                return blocks + self.matcher_.build_blocks(feat.psf_frame, psf_submap, pose)

            res = solve_with_reassociation(build, odom_pose, outer_iterations=self.map_outer_iterations, **self._lm())
            self.history_ += [dict(row, frame=index, stage="frame_to_submap") for row in res.history]
            if res.ok:
                map_pose = res.pose
            else:
                flags.append("map_degenerate" if res.degenerate else "map_diverged")
        elif index > 0:
            flags.append("map_skipped")
        timings["frame_to_submap"] = 1e3 * (time.perf_counter() - t0)

        # integration
        if index == 0:
            pose = Pose.identity()
            self._anchor, self._since_anchor = pose, []
        elif map_pose is not None:
            pose = integrate_pose(self._anchor, map_pose=map_pose)
            self._anchor, self._since_anchor = pose, []
        else:
            self._since_anchor.append(increment)
            pose = integrate_pose(self._anchor, self._since_anchor)

        # submap updates
        t0 = time.perf_counter()
        self.gef_submap_ = update_submap(
            self.gef_submap_, feat.corners, surfaces, pose,
            corner_voxel=self.corner_voxel, surface_voxel=self.surface_voxel, radius=self.submap_radius,
        )
        self.psf_submap_ = self.matcher_.update(self.psf_submap_, feat.psf_frame, pose)
        timings["update"] = 1e3 * (time.perf_counter() - t0)

        counts = dict(corners=len(feat.corners), surfaces=len(feat.surfaces), static_surfaces=len(static),
                      tracks=len(getattr(self.classifier_, "tracks_", [])))
        counts.update({f"psf_{k}": v for k, v in feat.psf_frame.counts().items()})
        counts["static_points"] = int(np.sum(labels == STATIC))
        counts["dynamic_points"] = int(np.sum(labels == DYNAMIC))
        result = FrameResult(sem.frame_index, odom_pose, map_pose, pose, counts, timings, flags, labels)
        self._prev_features = feat
        self.poses_.append(pose)
        self.results_.append(result)
        return result

    def process_frame(self, sem: SemanticCloud) -> FrameResult:
        return self.process_features(self.extract(sem))

    # ------------------------------------------------------------------ batch

    def _feature_stream(self, X: Iterable[SemanticCloud]):
        if self.mode == "sequential":
            for sem in X:
                yield self.extract(sem)
            return
        # ordered look-ahead: extraction is stateless, so results match sequential mode
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = []
            for sem in X:
                pending.append(pool.submit(self.extract, sem))
                if len(pending) > self.queue_size:
                    yield pending.pop(0).result()
            for fut in pending:
                yield fut.result()

    def fit(self, X: Iterable[SemanticCloud], y=None):
        self.reset()
        for feat in self._feature_stream(X):
            self.process_features(feat)
        return self

    def predict(self, X: Iterable[SemanticCloud]) -> list:
        return self.fit(X).poses_

    def finalize_labels(self) -> list:
        """Per-frame object labels after decoding every track over its full length."""
        return self.classifier_.finalize()

    # ------------------------------------------------------------------ outputs

    def write_outputs(self, out_dir, calib: Optional[Pose] = None, debug: bool = False, extra_manifest=None) -> Path:
        out = ensure_dir(out_dir)
        write_poses_kitti(self.poses_, out / "poses.txt", calib)
        write_frame_csv(self.results_, out / "frames.csv")
        if self.classify_objects:
            write_classification_csv(self.classifier_.rows_, out / "classification.csv")
        if debug:
            write_history_csv(self.history_, out / "solver_history.csv")
        write_manifest(out / "manifest.json", self, extra_manifest)
        return out


def write_frame_csv(results: Sequence[FrameResult], path) -> None:
    rows = [r.row() for r in results]
    keys: list = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _jsonable(value):
    if isinstance(value, BaseEstimator):
        return {"class": type(value).__name__, "params": _jsonable(value.get_params(deep=False))}
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else str(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def package_versions() -> dict:
    import scipy
    import sklearn

    from . import __version__

    return {"psflo": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def write_manifest(path, estimator: BaseEstimator, extra=None) -> None:
    """Config snapshot, package versions and seed for reproducing a run."""
    manifest = {
        "estimator": type(estimator).__name__,
        "config": _jsonable(estimator.get_params(deep=False)),
        "seed": _jsonable(estimator.get_params().get("random_state")),
        "versions": package_versions(),
    }
    if extra:
        manifest.update(_jsonable(extra))
    try:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc
