"""Trajectory plots as plain CSV and hand-written SVG."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import IoError, MalformedFile
from .geometry import Pose

EST_COLOR, GT_COLOR, PSF_COLOR = "#d62728", "#1f77b4", "#7f7f7f"


def write_trajectory_csv(poses: Sequence[Pose], path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "x", "y", "z"])
            for i, p in enumerate(poses):
                writer.writerow([i, *(f"{v:.6f}" for v in p.translation)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_psf_outlines(path, poses: Optional[Sequence[Pose]] = None) -> list:
    """Outline polylines from a PSF debug dump, moved to the world frame when poses are given."""
    groups = defaultdict(list)
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["frame"]), int(row["psf"]))
                groups[key].append((int(row["vertex"]), float(row["x"]), float(row["y"]), float(row["z"])))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedFile(f"{path}: not a PSF outline dump ({exc})") from exc
    out = []
    for (frame, _), rows in sorted(groups.items()):
        xyz = np.array([r[1:] for r in sorted(rows)])
        if poses is not None and frame < len(poses):
            xyz = poses[frame].apply(xyz)
        out.append(xyz)
    return out


def _polyline(xy: np.ndarray, color: str, width: float, closed: bool = False, label: str = "") -> str:
    pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in xy)
    tag = "polygon" if closed else "polyline"
    title = f"<title>{label}</title>" if label else ""
    return (f'<{tag} points="{pts}" fill="none" stroke="{color}" stroke-width="{width:.3f}" '
            f'stroke-linejoin="round">{title}</{tag}>')


def trajectory_svg(
    poses: Sequence[Pose],
    gt: Optional[Sequence[Pose]] = None,
    outlines: Sequence[np.ndarray] = (),
    size: int = 800,
    margin: int = 20,
) -> str:
    """Top-down (x right, y up) SVG of the estimated and optional ground-truth paths."""
    est = np.array([p.translation[:2] for p in poses]).reshape(-1, 2)
    ref = np.array([p.translation[:2] for p in gt]).reshape(-1, 2) if gt else np.empty((0, 2))
    shapes = [o[:, :2] for o in outlines if len(o)]
    every = np.vstack([est, ref, *shapes]) if len(est) + len(ref) + len(shapes) else np.zeros((1, 2))
    lo, hi = every.min(axis=0), every.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def to_px(xy):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        return np.column_stack([margin + (xy[:, 0] - lo[0]) * scale, size - margin - (xy[:, 1] - lo[1]) * scale])

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    parts += [_polyline(to_px(s), PSF_COLOR, 0.5, closed=True) for s in shapes]
    if len(ref):
        parts.append(_polyline(to_px(ref), GT_COLOR, 1.5, label="ground truth"))
    if len(est):
        parts.append(_polyline(to_px(est), EST_COLOR, 1.5, label="estimate"))
        x0, y0 = to_px(est[0])[0]
        parts.append(f'<circle cx="{x0:.3f}" cy="{y0:.3f}" r="4" fill="black"><title>start</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_trajectory_plot(
    poses: Sequence[Pose],
    path,
    gt: Optional[Sequence[Pose]] = None,
    outlines_csv=None,
) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths."""
    stem = Path(path)
    outlines = read_psf_outlines(outlines_csv, poses) if outlines_csv else ()
    csv_path = write_trajectory_csv(poses, stem.with_suffix(".csv"))
    svg_path = stem.with_suffix(".svg")
    try:
        svg_path.write_text(trajectory_svg(poses, gt, outlines))
    except OSError as exc:
        raise IoError(f"cannot write {svg_path}: {exc}") from exc
    return csv_path, svg_path
