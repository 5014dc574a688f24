"""Levenberg-Marquardt over a single 6-dof pose.

Residual blocks expose ``evaluate(pose) -> (r, J)`` with ``r`` of shape
``(M, k)`` and ``J`` of shape ``(M, k, 6)``. Each of the ``M`` rows is one
robustified term; the Jacobian is taken w.r.t. the increment used by
:func:`psflo.geometry.retract` (translation first, then rotation).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import Degenerate, Diverged
from .geometry import Pose, retract

logger = logging.getLogger(__name__)


class ResidualBlock:
    """Base class: a batch of residual terms of one kind."""

    kind = "generic"
    robust = False

    def __len__(self) -> int:  # pragma: no cover - overridden
        raise NotImplementedError

    def evaluate(self, pose: Pose) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover
        raise NotImplementedError

    def residual_norms(self, pose: Pose) -> np.ndarray:
        r, _ = self.evaluate(pose)
        return np.linalg.norm(r, axis=1)


def huber_cost(norms: np.ndarray, delta: float) -> np.ndarray:
    small = norms <= delta
    return np.where(small, 0.5 * norms**2, delta * (norms - 0.5 * delta))


def huber_row_weights(norms: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weights for the squared residual (1 inside the band, delta/s outside)."""
    w = np.ones_like(norms)
    big = norms > delta
    w[big] = delta / norms[big]
    return w


@dataclass
class SolveResult:
    pose: Pose
    iterations: int = 0
    converged: bool = False
    degenerate: bool = False
    diverged: bool = False
    cost: float = 0.0
    condition: float = 0.0
    mean_residual: float = 0.0
    history: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.degenerate or self.diverged)

    def raise_for_status(self) -> "SolveResult":
        if self.degenerate:
            raise Degenerate(f"normal equations ill-conditioned (cond={self.condition:.3g})")
        if self.diverged:
            raise Diverged(f"mean residual {self.mean_residual:.3g} after {self.iterations} iterations")
        return self


def _total_cost(blocks, pose, delta) -> tuple[float, dict]:
    total, per_kind = 0.0, {}
    for b in blocks:
        if len(b) == 0:
            continue
        norms = b.residual_norms(pose)
        c = huber_cost(norms, delta).sum() if b.robust else 0.5 * (norms**2).sum()
        total += c
        per_kind[b.kind] = per_kind.get(b.kind, 0.0) + float(np.sum(norms**2))
    return float(total), per_kind


def normal_equations(blocks, pose, delta) -> tuple[np.ndarray, np.ndarray, int]:
    """Gauss-Newton system ``H dx = -g`` with IRLS Huber weights."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    dims = 0
    for b in blocks:
        if len(b) == 0:
            continue
        r, J = b.evaluate(pose)
        if b.robust:
            sw = np.sqrt(huber_row_weights(np.linalg.norm(r, axis=1), delta))
            r = r * sw[:, None]
            J = J * sw[:, None, None]
        Jf = J.reshape(-1, 6)
        H += Jf.T @ Jf
        g += Jf.T @ r.reshape(-1)
        dims += r.size
    return H, g, dims


def condition_number(H: np.ndarray) -> float:
    eig = np.linalg.eigvalsh(0.5 * (H + H.T))
    if eig[0] <= 0 or eig[-1] <= 0:
        return np.inf
    return float(eig[-1] / eig[0])


def levenberg_marquardt(
    blocks: Sequence[ResidualBlock],
    init: Pose,
    max_iterations: int = 20,
    rotation_tol: float = 1e-4,
    translation_tol: float = 1e-3,
    huber_delta: float = 0.1,
    max_condition: float = 1e8,
    initial_damping: float = 1e-4,
    divergence_threshold: float = np.inf,
) -> SolveResult:
    """Minimize the (robust) sum of squares over ``init``'s 6 degrees of freedom.

    Returns ``init`` with ``degenerate=True`` when the normal equations at the
    starting point have fewer than 6 dimensions or a condition number above
    ``max_condition``.
    """
    pose = init
    H, g, dims = normal_equations(blocks, pose, huber_delta)
    cond = condition_number(H) if dims >= 6 else np.inf
    if cond > max_condition:
        return SolveResult(init, degenerate=True, condition=cond)

    cost, per_kind = _total_cost(blocks, pose, huber_delta)
    history = [dict(iteration=0, cost=cost, step_rotation=0.0, step_translation=0.0,
                    damping=initial_damping, accepted=True, **per_kind)]
    mu = initial_damping
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        A = H + mu * np.diag(np.maximum(np.diag(H), 1e-12))
        try:
            step = np.linalg.solve(A, -g)
        except np.linalg.LinAlgError:
            break
        candidate = retract(pose, step)
        new_cost, new_per_kind = _total_cost(blocks, candidate, huber_delta)
        step_t = float(np.linalg.norm(step[:3]))
        step_r = float(np.linalg.norm(step[3:]))
        accepted = new_cost <= cost
        history.append(dict(iteration=it, cost=new_cost if accepted else cost,
                            step_rotation=step_r, step_translation=step_t, damping=mu,
                            accepted=accepted, **(new_per_kind if accepted else per_kind)))
        if accepted:
            pose, cost = candidate, new_cost
            mu = max(mu / 10.0, 1e-12)
            if step_r < rotation_tol and step_t < translation_tol:
                converged = True
                break
            H, g, _ = normal_equations(blocks, pose, huber_delta)
        else:
            mu *= 10.0
            if step_r < rotation_tol * 1e-3 and step_t < translation_tol * 1e-3:
                # rejected step already negligible: at a minimum up to round-off
                converged = True
                break

    norms = [b.residual_norms(pose) for b in blocks if len(b)]
    mean_res = float(np.mean(np.concatenate(norms))) if norms else 0.0
    return SolveResult(
        pose=pose,
        iterations=it,
        converged=converged,
        cost=cost,
        condition=cond,
        mean_residual=mean_res,
        diverged=bool(mean_res > divergence_threshold),
        history=history,
    )


def solve_with_reassociation(
    build_blocks: Callable[[Pose], Sequence[ResidualBlock]],
    init: Pose,
    outer_iterations: int = 3,
    outer_rotation_tol: float = 1e-4,
    outer_translation_tol: float = 1e-3,
    **lm_kwargs,
) -> SolveResult:
    """Alternate correspondence search (``build_blocks``) and LM solves."""
    pose = init
    history: list = []
    result = SolveResult(init)
    for outer in range(outer_iterations):
        blocks = build_blocks(pose)
        result = levenberg_marquardt(blocks, pose, **lm_kwargs)
        for row in result.history:
            history.append(dict(row, outer=outer))
        if result.degenerate:
            result.pose = pose
            break
        moved = result.pose.translation - pose.translation
        rot = result.pose.rotation @ pose.rotation.T
        angle = np.arccos(np.clip((np.trace(rot) - 1) / 2, -1, 1))
        pose = result.pose
        if np.linalg.norm(moved) < outer_translation_tol and angle < outer_rotation_tol:
            break
    result.history = history
    return result


def write_history_csv(history: Sequence[dict], path) -> None:
    """Per-iteration cost and per-kind squared residual norms."""
    keys: list = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in history:
            writer.writerow(row)
