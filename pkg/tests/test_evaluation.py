import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psflo.evaluation import ClassificationReport, eval_classification, eval_odometry_kitti, trajectory_distances
from psflo.exceptions import LengthMismatch, TooShort
from psflo.geometry import Pose, compose
from psflo.tracking import DYNAMIC, NOT_OBJECT, STATIC


def straight(n, step=1.0, scale=1.0):
    return [Pose(np.eye(3), [i * step * scale, 0, 0]) for i in range(n)]


def wiggly(n, seed=0):
    rng = np.random.default_rng(seed)
    poses, pose = [Pose.identity()], Pose.identity()
    for _ in range(n - 1):
        pose = compose(pose, Pose.from_rotvec([0, 0, rng.normal(scale=0.02)], [1.0, rng.normal(scale=0.05), 0]))
        poses.append(pose)
    return poses


# ---------------------------------------------------------------- odometry


def test_perfect_estimate_has_zero_error():
    gt = wiggly(300)
    rep = eval_odometry_kitti(gt, gt)
    assert rep.translational == pytest.approx(0.0, abs=1e-9)
    assert rep.rotational == pytest.approx(0.0, abs=1e-6)
    assert rep.segments > 0


def test_one_percent_scale_on_straight_path():
    step = 0.1
    gt = straight(8002, step=step)
    rep = eval_odometry_kitti(straight(8002, step=step, scale=1.01), gt, step=100)
    # a segment ends at the first frame strictly beyond L, one step past it
    expected = {L: 1.0 * (L + step) / L for L in rep.per_length}
    for L, (t, _, _) in rep.per_length.items():
        assert t == pytest.approx(expected[L], rel=1e-6)
    assert rep.translational == pytest.approx(1.0, abs=2e-3)
    assert set(rep.per_length) == {100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0}
    assert rep.per_length[800.0][2] == 1
    assert rep.endpoint_drift == pytest.approx(1.0, abs=1e-9)


def test_short_path_and_length_mismatch():
    with pytest.raises(TooShort):
        eval_odometry_kitti(straight(51), straight(51))
    with pytest.raises(TooShort):
        eval_odometry_kitti(straight(1), straight(1))
    with pytest.raises(LengthMismatch):
        eval_odometry_kitti(straight(200), straight(201))


def test_average_is_mean_over_segments():
    gt = wiggly(260, seed=1)
    est = wiggly(260, seed=2)
    rep = eval_odometry_kitti(est, gt)
    weighted = sum(t * n for t, _, n in rep.per_length.values()) / rep.segments
    assert rep.translational == pytest.approx(weighted, rel=1e-12)
    assert all(t >= 0 and r >= 0 for t, r, _ in rep.per_length.values())


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_odometry_error_invariant_to_global_rigid_transform(xi):
    gt = wiggly(150, seed=3)
    est = wiggly(150, seed=4)
    g = Pose.from_rotvec(np.asarray(xi[3:]) * 3, np.asarray(xi[:3]) * 100)
    a = eval_odometry_kitti(est, gt)
    b = eval_odometry_kitti([compose(g, p) for p in est], [compose(g, p) for p in gt])
    assert b.translational == pytest.approx(a.translational, rel=1e-6)
    assert b.rotational == pytest.approx(a.rotational, rel=1e-5, abs=1e-9)


def test_trajectory_distances():
    np.testing.assert_allclose(trajectory_distances(straight(4, step=2.0)), [0, 2, 4, 6])


def test_report_files(tmp_path):
    rep = eval_odometry_kitti(straight(201, scale=1.02), straight(201))
    txt, kv = rep.write(tmp_path / "sub" / "report")
    pairs = dict(line.split("=", 1) for line in kv.read_text().splitlines())
    assert float(pairs["translational_error_pct"]) == pytest.approx(rep.translational, rel=1e-5)
    assert int(pairs["segments"]) == rep.segments
    assert "translational error pct" in txt.read_text()


# ---------------------------------------------------------------- classification


def test_perfect_classification():
    gt = np.array([STATIC, DYNAMIC, STATIC, NOT_OBJECT])
    rep = eval_classification(gt.copy(), gt)
    for c in (STATIC, DYNAMIC):
        assert rep.precision(c) == rep.recall(c) == rep.iou(c) == 1.0
    assert rep.zero_support == []


def test_all_static_on_unbalanced_mix():
    gt = np.array([STATIC] * 195 + [DYNAMIC] * 10)
    rep = eval_classification(np.full(205, STATIC), gt)
    assert rep.precision(STATIC) == pytest.approx(195 / 205)
    assert round(rep.precision(STATIC), 3) == 0.951
    assert rep.recall(DYNAMIC) == 0.0
    assert "dynamic_precision" in rep.zero_support


def test_empty_intersection_flags_zero_support():
    rep = eval_classification(np.array([NOT_OBJECT, STATIC]), np.array([DYNAMIC, NOT_OBJECT]))
    assert np.isnan(rep.precision(STATIC)) and np.isnan(rep.iou(DYNAMIC))
    assert len(rep.zero_support) == 6
    assert "zero_support=" in rep.to_kv()


def test_classification_length_mismatch():
    with pytest.raises(LengthMismatch):
        eval_classification([np.zeros(3)], [np.zeros(3), np.zeros(3)])
    with pytest.raises(LengthMismatch):
        eval_classification(np.zeros(3), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.integers(1, 4))
def test_classification_counts_permutation_invariant_and_additive(seed, n, frames):
    rng = np.random.default_rng(seed)
    pred = [rng.integers(-1, 2, size=n) for _ in range(frames)]
    gt = [rng.integers(-1, 2, size=n) for _ in range(frames)]
    whole = eval_classification(pred, gt)
    parts = ClassificationReport()
    for p, g in zip(pred, gt):
        perm = rng.permutation(n)
        parts = parts + eval_classification(p[perm], g[perm])
    assert (whole.tp, whole.fp, whole.fn) == (parts.tp, parts.fp, parts.fn)
    for c in (STATIC, DYNAMIC):
        iou, prec, rec = whole.iou(c), whole.precision(c), whole.recall(c)
        if not np.isnan(iou):
            assert 0 <= iou <= min(np.nan_to_num(prec, nan=1), np.nan_to_num(rec, nan=1)) + 1e-12
