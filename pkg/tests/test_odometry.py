import json

import numpy as np
import pytest

from psflo.geometry import Pose, compose, so3_exp
from psflo.odometry import PSFLidarOdometry, integrate_pose, predict_pose
from psflo.synthetic import ROAD_ID, SENSOR_HEIGHT, Quad, SensorModel, SyntheticScene, corridor_scene


def twist_pose(xi):
    """Exact SE(3) exponential of a (rho, phi) twist."""
    rho, phi = np.asarray(xi[:3], dtype=float), np.asarray(xi[3:], dtype=float)
    theta = max(np.linalg.norm(phi), 1e-12)
    k = np.array([[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]])
    V = np.eye(3) + (1 - np.cos(theta)) / theta**2 * k + (theta - np.sin(theta)) / theta**3 * k @ k
    return Pose(so3_exp(phi), V @ rho)


@pytest.fixture(scope="module")
def corridor_frames():
    return corridor_scene(n_frames=8, seed=3).clouds()


# ---------------------------------------------------------------- pose helpers


def test_predict_pose_examples():
    single = predict_pose([Pose.identity()])
    np.testing.assert_array_equal(single.matrix, np.eye(4))
    hist = [Pose(np.eye(3), [float(i), 0, 0]) for i in range(3)]
    np.testing.assert_allclose(predict_pose(hist).translation, [3, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        predict_pose([])


def test_predict_pose_constant_twist_is_exact():
    step = twist_pose([1.0, 0.1, 0.0, 0.0, 0.02, 0.05])
    hist = [Pose.identity()]
    for _ in range(4):
        hist.append(compose(hist[-1], step))
    truth = compose(hist[-1], step)
    pred = predict_pose(hist)
    np.testing.assert_allclose(pred.translation, truth.translation, atol=1e-9)
    np.testing.assert_allclose(pred.rotation, truth.rotation, atol=1e-9)


def test_predict_pose_curved_motion_error_is_second_order():
    errs = []
    for h in (0.2, 0.1, 0.05):
        # yaw rate ramps with time, so increments change by O(h^2)
        poses = [twist_pose([h * t, 0, 0, 0, 0, 0.1 * (h * t) ** 2]) for t in range(4)]
        pred = predict_pose(poses[:3])
        errs.append(np.linalg.norm(pred.translation - poses[3].translation))
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3


def test_integrate_pose_rules():
    tm = Pose.from_rotvec([0, 0, 0.1], [1, 2, 0])
    assert integrate_pose(Pose.identity(), [], tm) is tm
    inc = Pose.from_rotvec([0, 0, 0.05], [1, 0, 0])
    out = integrate_pose(tm, [inc])
    expected = compose(tm, inc)
    np.testing.assert_allclose(out.translation, expected.translation)
    np.testing.assert_allclose(out.rotation, expected.rotation)


# ---------------------------------------------------------------- estimator


def test_first_frame_is_identity_and_trajectory_gap_free(corridor_frames):
    est = PSFLidarOdometry().fit(corridor_frames[:4])
    assert len(est.poses_) == 4
    np.testing.assert_array_equal(est.poses_[0].translation, 0)
    np.testing.assert_array_equal(est.poses_[0].rotation, np.eye(3))
    for r in est.results_:
        assert all(v >= 0 for v in r.timings.values())


def test_stationary_sensor_stays_put(corridor_frames):
    est = PSFLidarOdometry().fit([corridor_frames[0]] * 10)
    assert np.linalg.norm(est.poses_[-1].translation) < 1e-3


def test_degenerate_frame_falls_back_to_prediction():
    road = [Quad((0.0, 0.0, -SENSOR_HEIGHT), (60.0, 0, 0), (0, 60.0, 0), ROAD_ID)]
    poses = [Pose(np.eye(3), [0.5 * i, 0, 0]) for i in range(3)]
    sensor = SensorModel(range_noise=0.0, azimuth_step_deg=0.4)
    frames = SyntheticScene(road, [], poses, sensor, 0).clouds()
    est = PSFLidarOdometry().fit(frames)
    flagged = [i for i, r in enumerate(est.results_) if "odom_degenerate" in r.flags]
    assert flagged == [1, 2]
    for i in flagged:
        pred = predict_pose(est.poses_[:i])
        np.testing.assert_allclose(est.poses_[i].matrix, pred.matrix, atol=1e-12)


def test_refine_every_skips_map_stage(corridor_frames):
    est = PSFLidarOdometry(refine_every=2).fit(corridor_frames[:4])
    assert "map_skipped" in est.results_[1].flags
    assert est.results_[2].map_pose is not None
    # without a map pose the frame integrates the odom increment onto the last map pose
    np.testing.assert_allclose(est.poses_[1].matrix, est.results_[1].odom_pose.matrix, atol=1e-12)


def test_no_objects_ablation_runs(corridor_frames):
    est = PSFLidarOdometry(psf_gain=0.0, classify_objects=False).fit(corridor_frames[:4])
    assert len(est.poses_) == 4
    truth = corridor_scene(n_frames=8, seed=3).poses
    assert np.linalg.norm(est.poses_[3].translation - truth[3].translation) < 0.1


def test_threaded_matches_sequential_bitwise(corridor_frames):
    seq = PSFLidarOdometry().fit(corridor_frames[:5]).poses_
    thr = PSFLidarOdometry(mode="threaded", queue_size=2).fit(corridor_frames[:5]).poses_
    for a, b in zip(seq, thr):
        assert np.array_equal(a.translation, b.translation)
        assert np.array_equal(a.rotation, b.rotation)


def test_bad_params_rejected(corridor_frames):
    with pytest.raises(ValueError):
        PSFLidarOdometry(mode="fast").fit(corridor_frames[:1])
    with pytest.raises(ValueError):
        PSFLidarOdometry(refine_every=0).fit(corridor_frames[:1])


def test_write_outputs(tmp_path, corridor_frames):
    est = PSFLidarOdometry().fit(corridor_frames[:3])
    out = est.write_outputs(tmp_path / "run", debug=True, extra_manifest={"dataset": "synthetic"})
    lines = (out / "poses.txt").read_text().splitlines()
    assert len(lines) == 3 and len(lines[0].split()) == 12
    header = (out / "frames.csv").read_text().splitlines()[0].split(",")
    assert {"frame", "x", "y", "z", "flags", "ms_extract"} <= set(header)
    assert (out / "classification.csv").exists() and (out / "solver_history.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["dataset"] == "synthetic"
    assert manifest["config"]["psf_gain"] == 1.0
    assert {"psflo", "numpy", "scipy", "scikit-learn"} <= set(manifest["versions"])
