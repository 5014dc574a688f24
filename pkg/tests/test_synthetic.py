import numpy as np
import pytest

from psflo.geometry import Pose
from psflo.io import KittiSequence
from psflo.synthetic import (
    CAR_ID,
    ROAD_ID,
    SENSOR_HEIGHT,
    Quad,
    SensorModel,
    SyntheticScene,
    box,
    classifier_benchmark,
    corridor_scene,
    scene_from_spec,
    write_dataset,
)
from psflo.tracking import DynamicObjectClassifier

ROAD = Quad((0.0, 0.0, -SENSOR_HEIGHT), (30.0, 0, 0), (0, 30.0, 0), ROAD_ID)


def test_static_world_identity_trajectory_repeats():
    scene = SyntheticScene([ROAD, *box((8, 0, -1.0), (4, 2, 1.5))], [], [Pose.identity()] * 3,
                           SensorModel(range_noise=0.0), 0)
    a, b = scene.generate(0)[0], scene.generate(2)[0]
    np.testing.assert_array_equal(a.xyz, b.xyz)
    np.testing.assert_array_equal(a.class_id, b.class_id)


def test_generation_is_deterministic_under_seed():
    a = corridor_scene(n_frames=2, seed=5).generate(1)[0]
    b = corridor_scene(n_frames=2, seed=5).generate(1)[0]
    np.testing.assert_array_equal(a.xyz, b.xyz)


def test_moving_box_advances_with_velocity():
    car = box((10.0, 0.0, -1.0), (4.0, 2.0, 1.5), class_id=CAR_ID, instance_id=1, velocity=(10.0, 0, 0))
    scene = SyntheticScene([ROAD, *car], [], [Pose.identity()] * 2, SensorModel(range_noise=0.0), 0)
    states = [scene.generate(i)[1].objects[1] for i in range(2)]
    np.testing.assert_allclose(states[1][0] - states[0][0], [1.0, 0, 0])
    # the visible rear face moves with the box
    rear = [s.xyz[s.instance_id == 1][:, 0].min() for s, _ in (scene.generate(0), scene.generate(1))]
    assert abs(rear[1] - rear[0] - 1.0) < 0.05


def test_scene_without_objects_gives_no_tracks():
    scene = SyntheticScene([ROAD], [], [Pose(np.eye(3), [i * 0.5, 0, 0]) for i in range(3)],
                           SensorModel(range_noise=0.0), 0)
    frames = [scene.generate(i) for i in range(3)]
    clf = DynamicObjectClassifier().fit([s for s, _ in frames], [t.pose for _, t in frames])
    assert clf.tracks_ == [] and clf.finished_ == []


def test_labels_and_rings_present():
    sem, truth = corridor_scene(n_frames=1).generate(0)
    assert len(sem) > 10_000
    assert set(np.unique(sem.class_id)) >= {ROAD_ID}
    rings = sem.cloud.rings()
    assert rings.min() >= 0 and rings.max() <= 63
    np.testing.assert_array_equal(truth.pose.rotation, np.eye(3))


def test_scene_from_spec_and_dataset_export(tmp_path):
    scene = scene_from_spec({"preset": "corridor", "n_frames": 2, "seed": 1})
    assert len(scene) == 2
    custom = scene_from_spec({
        "quads": [{"center": [0, 0, -1.73], "u": [10, 0, 0], "v": [0, 10, 0], "class_id": ROAD_ID}],
        "boxes": [{"center": [6, 0, -1.0], "size": [4, 2, 1.5], "instance_id": 3}],
        "n_frames": 2,
        "step": 0.5,
    })
    assert len(custom) == 2
    with pytest.raises(TypeError):
        scene_from_spec({"n_frame": 2})
    seq = write_dataset(scene, tmp_path, "07")
    loaded = KittiSequence(tmp_path, "07")
    assert len(loaded) == 2 and seq.name == "07"
    gt = loaded.ground_truth()
    np.testing.assert_allclose(gt[1].translation, scene.poses[1].translation, atol=1e-6)
    np.testing.assert_array_equal(loaded.frame(0).class_id, scene.generate(0)[0].class_id)


def test_classifier_benchmark_track_mix():
    scenes = classifier_benchmark()
    static = dynamic = 0
    for scene in scenes:
        states = scene.object_states(0.0)
        dynamic += sum(moving for _, _, moving in states.values())
        static += sum(not moving for _, _, moving in states.values())
    assert (static, dynamic) == (20, 20)
    slow = [np.linalg.norm(v) for s in scenes for _, v, m in s.object_states(0.0).values()
            if m and np.isclose(np.linalg.norm(v), 0.5)]
    assert len(slow) >= 5
