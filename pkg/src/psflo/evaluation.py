"""Odometry and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import IoError, LengthMismatch, TooShort
from .geometry import Pose, compose, invert
from .io import SemanticCloud, TaxonomyMap
from .tracking import DYNAMIC, NOT_OBJECT, STATIC

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


# --------------------------------------------------------------------------
# reports


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


class _Report:
    def items(self) -> list:  # pragma: no cover - overridden
        raise NotImplementedError

    def to_kv(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def to_text(self) -> str:
        width = max((len(k) for k, _ in self.items()), default=0)
        return "".join(f"{k.replace('_', ' '):<{width}}  {_fmt(v)}\n" for k, v in self.items())

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.txt`` (human readable) and ``<stem>.kv`` (key=value)."""
        stem = Path(stem)
        try:
            stem.parent.mkdir(parents=True, exist_ok=True)
            txt, kv = stem.with_suffix(".txt"), stem.with_suffix(".kv")
            txt.write_text(self.to_text())
            kv.write_text(self.to_kv())
        except OSError as exc:
            raise IoError(f"cannot write report {stem}: {exc}") from exc
        return txt, kv


@dataclass
class OdometryErrorReport(_Report):
    per_length: dict  # length -> (translational %, rotational deg/m, segment count)
    translational: float  # percent, mean over all segments
    rotational: float  # deg/m, mean over all segments
    segments: int
    endpoint_drift: float = float("nan")  # percent of path length
    path_length: float = float("nan")

    def items(self) -> list:
        out = [("translational_error_pct", self.translational), ("rotational_error_deg_per_m", self.rotational),
               ("segments", self.segments), ("path_length_m", self.path_length),
               ("endpoint_drift_pct", self.endpoint_drift)]
        for length, (t, r, n) in sorted(self.per_length.items()):
            out += [(f"t_err_{int(length)}m_pct", t), (f"r_err_{int(length)}m_deg_per_m", r), (f"n_{int(length)}m", n)]
        return out


def trajectory_distances(poses: Sequence[Pose]) -> np.ndarray:
    xyz = np.array([p.translation for p in poses])
    steps = np.linalg.norm(np.diff(xyz, axis=0), axis=1)
    return np.r_[0.0, np.cumsum(steps)]


def _rotation_angle(rot: np.ndarray) -> float:
    return float(np.arccos(np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)))


def eval_odometry_kitti(
    est: Sequence[Pose],
    gt: Sequence[Pose],
    lengths: Sequence[float] = SEGMENT_LENGTHS,
    step: int = 10,
) -> OdometryErrorReport:
    """Segment-based relative pose error, starting a segment every ``step`` frames."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if len(gt) < 2:
        raise TooShort("need at least two poses")
    dist = trajectory_distances(gt)
    errors = {float(L): [] for L in lengths}
    for first in range(0, len(gt), step):
        for L in errors:
            last = int(np.searchsorted(dist, dist[first] + L, side="right"))
            if last >= len(gt):
                continue
            delta_gt = compose(invert(gt[first]), gt[last])
            delta_est = compose(invert(est[first]), est[last])
            err = compose(invert(delta_est), delta_gt)
            errors[L].append((np.linalg.norm(err.translation) / L, np.degrees(_rotation_angle(err.rotation)) / L))
    flat = [e for v in errors.values() for e in v]
    if not flat:
        raise TooShort(f"ground-truth path is {dist[-1]:.1f} m, shorter than the shortest segment {min(lengths)} m")
    per_length = {
        L: (100.0 * float(np.mean([t for t, _ in v])), float(np.mean([r for _, r in v])), len(v))
        for L, v in errors.items() if v
    }
    arr = np.array(flat)
    drift = np.linalg.norm(est[-1].translation - gt[-1].translation)
    return OdometryErrorReport(
        per_length,
        100.0 * float(arr[:, 0].mean()),
        float(arr[:, 1].mean()),
        len(flat),
        100.0 * float(drift / dist[-1]) if dist[-1] > 0 else float("nan"),
        float(dist[-1]),
    )


# --------------------------------------------------------------------------
# classification


CLASS_NAMES = {STATIC: "static", DYNAMIC: "dynamic"}


@dataclass
class ClassificationReport(_Report):
    tp: dict = field(default_factory=lambda: {STATIC: 0, DYNAMIC: 0})
    fp: dict = field(default_factory=lambda: {STATIC: 0, DYNAMIC: 0})
    fn: dict = field(default_factory=lambda: {STATIC: 0, DYNAMIC: 0})

    def __add__(self, other: "ClassificationReport") -> "ClassificationReport":
        return ClassificationReport(
            {c: self.tp[c] + other.tp[c] for c in CLASS_NAMES},
            {c: self.fp[c] + other.fp[c] for c in CLASS_NAMES},
            {c: self.fn[c] + other.fn[c] for c in CLASS_NAMES},
        )

    @staticmethod
    def _ratio(num, den) -> float:
        return float(num / den) if den else float("nan")

    def precision(self, cls: int) -> float:
        return self._ratio(self.tp[cls], self.tp[cls] + self.fp[cls])

    def recall(self, cls: int) -> float:
        return self._ratio(self.tp[cls], self.tp[cls] + self.fn[cls])

    def iou(self, cls: int) -> float:
        return self._ratio(self.tp[cls], self.tp[cls] + self.fp[cls] + self.fn[cls])

    @property
    def zero_support(self) -> list:
        """Metric names whose denominator is zero (reported as nan)."""
        out = []
        for c, name in CLASS_NAMES.items():
            if self.tp[c] + self.fp[c] == 0:
                out.append(f"{name}_precision")
            if self.tp[c] + self.fn[c] == 0:
                out.append(f"{name}_recall")
            if self.tp[c] + self.fp[c] + self.fn[c] == 0:
                out.append(f"{name}_iou")
        return out

    def items(self) -> list:
        out = []
        for c, name in CLASS_NAMES.items():
            out += [(f"{name}_precision", self.precision(c)), (f"{name}_recall", self.recall(c)),
                    (f"{name}_iou", self.iou(c)), (f"{name}_tp", self.tp[c]), (f"{name}_fp", self.fp[c]),
                    (f"{name}_fn", self.fn[c])]
        out.append(("zero_support", ",".join(self.zero_support) or "none"))
        return out


def eval_classification(pred, gt) -> ClassificationReport:
    """Point-wise counts over points that both sides label as object.

    ``pred`` and ``gt`` are per-point label arrays (or per-frame lists of them)
    with values static, dynamic or not-object.
    """
    if isinstance(pred, np.ndarray) and pred.dtype != object:
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth frames")
    report = ClassificationReport()
    for p, g in zip(pred, gt):
        p, g = np.asarray(p).reshape(-1), np.asarray(g).reshape(-1)
        if len(p) != len(g):
            raise LengthMismatch(f"{len(p)} predicted vs {len(g)} ground-truth labels")
        both = (p != NOT_OBJECT) & (g != NOT_OBJECT)
        p, g = p[both], g[both]
        for c in CLASS_NAMES:
            report.tp[c] += int(np.sum((p == c) & (g == c)))
            report.fp[c] += int(np.sum((p == c) & (g != c)))
            report.fn[c] += int(np.sum((p != c) & (g == c)))
    return report


def motion_labels(sem: SemanticCloud, taxonomy: Optional[TaxonomyMap] = None) -> np.ndarray:
    """Ground-truth static/dynamic labels from moving-class ids; non-object points get not-object."""
    taxonomy = taxonomy or TaxonomyMap.default()
    out = np.full(len(sem), NOT_OBJECT, dtype=np.int8)
    obj = sem.mask("object")
    out[obj] = np.where(taxonomy.moving_mask(sem.class_id[obj]), DYNAMIC, STATIC)
    return out


def benchmark_classifier(scenes: Iterable, classifier=None, taxonomy: Optional[TaxonomyMap] = None) -> ClassificationReport:
    """Run a fresh classifier per synthetic scene on ground-truth poses and pool the counts."""
    from sklearn.base import clone

    from .tracking import DynamicObjectClassifier

    report = ClassificationReport()
    for scene in scenes:
        frames = [scene.generate(i) for i in range(len(scene))]
        clf = clone(classifier) if classifier is not None else DynamicObjectClassifier()
        pred = clf.predict([sem for sem, _ in frames], [truth.pose for _, truth in frames])
        report = report + eval_classification(pred, [motion_labels(sem, taxonomy) for sem, _ in frames])
    return report
