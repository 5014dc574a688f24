import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psflo.gef import (
    CORNER,
    SURFACE,
    GeFExtractor,
    GeFSet,
    GeFSubmap,
    PointToLineBlock,
    PointToPlaneBlock,
    build_gef_residuals,
    match_frame_to_frame,
    semantic_weight,
    update_submap,
)
from psflo.geometry import Pose, retract
from psflo.synthetic import BUILDING_ID, ROAD_ID, SENSOR_HEIGHT, Quad, SensorModel, SyntheticScene, corridor_scene

QUIET = SensorModel(range_noise=0.0, azimuth_step_deg=0.4)


def scene(quads):
    return SyntheticScene(quads, [], [Pose.identity()], QUIET, 0).generate(0)[0]


def central_fd(block, pose, h=1e-6):
    _, J = block.evaluate(pose)
    Jn = np.zeros_like(J)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        Jn[:, :, k] = (block.evaluate(retract(pose, e))[0] - block.evaluate(retract(pose, -e))[0]) / (2 * h)
    return np.max(np.abs(J - Jn)) / max(np.max(np.abs(Jn)), 1e-12)


# ---------------------------------------------------------------- semantic weight


def test_semantic_weight_examples():
    assert semantic_weight(0.8, 0) == pytest.approx(0.4, abs=1e-12)
    assert semantic_weight(1.0, 1) == pytest.approx(0.880797, abs=1e-6)
    assert semantic_weight(1.0, 2) == pytest.approx(1 / (1 + np.exp(-4)), abs=1e-12)


@given(st.floats(0, 10), st.integers(0, 50))
def test_semantic_weight_monotone_and_bounded(w, n):
    a, b = semantic_weight(w, n), semantic_weight(w, n + 1)
    assert a <= b + 1e-15
    assert b <= w + 1e-15


# ---------------------------------------------------------------- extraction


def test_dihedral_edge_points_become_corners():
    h = SENSOR_HEIGHT
    walls = [
        Quad((8.0, 2.0, 1.0), (0, 6.0, 0), (0, 0, 3.0), BUILDING_ID),  # x = 8 for y in [-4, 8]
        Quad((2.0, 8.0, 1.0), (6.0, 0, 0), (0, 0, 3.0), BUILDING_ID),  # y = 8 for x in [-4, 8]
        Quad((0.0, 0.0, -h), (30.0, 0, 0), (0, 30.0, 0), ROAD_ID),
    ]
    corners, surfaces = GeFExtractor(surface_voxel=0).extract(scene(walls))
    building = corners.points[corners.class_id == BUILDING_ID]
    # vertical edges: the dihedral at (8, 8) and the two free wall ends
    edges = np.array([[8.0, 8.0], [8.0, -4.0], [-4.0, 8.0]])
    dist = np.linalg.norm(building[:, None, :2] - edges[None], axis=2)
    on_wall_foot = np.abs(building[:, 2] + h) < 0.3
    assert np.all((dist.min(axis=1) < 0.5) | on_wall_foot)
    assert np.sum(dist[:, 0] < 0.5) >= 5
    assert np.all(surfaces.curvature < 0.1)


def test_flat_road_has_no_corners():
    road = [Quad((0.0, 0.0, -SENSOR_HEIGHT), (60.0, 0, 0), (0, 60.0, 0), ROAD_ID)]
    corners, surfaces = GeFExtractor().extract(scene(road))
    assert len(corners) == 0
    assert len(surfaces) > 0


def test_smooth_wall_gives_low_curvature_surfaces():
    wall = [Quad((10.0, 0.0, 2.0), (0, 40.0, 0), (0, 0, 6.0), BUILDING_ID)]
    ext = GeFExtractor(surface_voxel=0)
    corners, surfaces = ext.extract(scene(wall))
    assert len(surfaces) > 0
    assert np.all(surfaces.curvature < ext.corner_threshold)
    # the only corner candidates are the wall's far ends, never its interior
    assert np.all(np.abs(corners.points[:, 1]) > 5.0)


def test_exclude_mask_removes_points():
    road = [Quad((0.0, 0.0, -SENSOR_HEIGHT), (60.0, 0, 0), (0, 60.0, 0), ROAD_ID)]
    sem = scene(road)
    corners, surfaces = GeFExtractor().extract(sem, exclude=np.ones(len(sem), dtype=bool))
    assert len(corners) == len(surfaces) == 0


# ---------------------------------------------------------------- residual blocks


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_point_to_line_matches_distance_formula(seed):
    rng = np.random.default_rng(seed)
    x, a, u = rng.normal(size=(3, 3))
    w = rng.uniform(0.1, 1.0)
    r, _ = PointToLineBlock([x], [a], [u], [w]).evaluate(Pose.identity())
    u = u / np.linalg.norm(u)
    dist = np.linalg.norm(np.cross(x - a, u))
    assert np.linalg.norm(r) == pytest.approx(w * dist, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_point_to_plane_matches_distance_formula(seed):
    rng = np.random.default_rng(seed)
    x, n = rng.normal(size=(2, 3))
    n /= np.linalg.norm(n)
    d, w = rng.normal(), rng.uniform(0.1, 1.0)
    r, _ = PointToPlaneBlock([x], [n], [d], [w]).evaluate(Pose.identity())
    assert r[0, 0] == pytest.approx(w * (n @ x - d), abs=1e-12)


def test_gef_jacobians_match_central_differences(rng):
    for _ in range(200):
        pose = Pose.from_rotvec(rng.normal(scale=0.5, size=3), rng.normal(scale=3, size=3))
        m = 4
        line = PointToLineBlock(rng.normal(size=(m, 3)) * 5, rng.normal(size=(m, 3)), rng.normal(size=(m, 3)),
                                rng.uniform(0.2, 1, m))
        plane = PointToPlaneBlock(rng.normal(size=(m, 3)) * 5, rng.normal(size=(m, 3)), rng.normal(size=m),
                                  rng.uniform(0.2, 1, m))
        assert central_fd(line, pose) < 1e-5
        assert central_fd(plane, pose) < 1e-5


def _edge_submap(cls_ids):
    z = np.linspace(-0.4, 0.4, len(cls_ids))
    pts = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    return GeFSubmap(GeFSet(CORNER, pts, np.zeros(len(z)), np.asarray(cls_ids)), None)


def test_corner_near_edge_residual():
    submap = _edge_submap([BUILDING_ID] * 5)
    corners = GeFSet(CORNER, [[0.2, 0.0, 0.1]], [1.0], [BUILDING_ID])
    line, _ = build_gef_residuals(corners, GeFSet.empty(SURFACE), submap, Pose.identity())
    weight = (1 - 0.9 * 0.2) / (1 + np.exp(-2 * 5))
    r, _ = line.evaluate(Pose.identity())
    assert np.linalg.norm(r) == pytest.approx(0.2 * weight, abs=1e-12)


def test_mixed_class_neighbors_weight_factor():
    submap = _edge_submap([BUILDING_ID, BUILDING_ID, 80, 80, 80])
    corners = GeFSet(CORNER, [[0.0, 0.0, 0.0]], [1.0], [BUILDING_ID])
    line, _ = build_gef_residuals(corners, GeFSet.empty(SURFACE), submap, Pose.identity())
    assert line.weights[0] == pytest.approx(1 / (1 + np.exp(-4)), abs=1e-12)


def test_surface_on_submap_plane_has_zero_residual(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (30, 2)), np.full(30, 2.0)])
    submap = GeFSubmap(None, GeFSet(SURFACE, pts, np.zeros(30), np.full(30, ROAD_ID)))
    surfaces = GeFSet(SURFACE, [[0.1, -0.2, 2.0]], [0.0], [ROAD_ID])
    _, plane = build_gef_residuals(GeFSet.empty(CORNER), surfaces, submap, Pose.identity())
    assert len(plane) == 1
    assert abs(plane.evaluate(Pose.identity())[0][0, 0]) < 1e-12


# ---------------------------------------------------------------- submap


def test_update_submap_voxel_static_and_radius():
    dup = GeFSet(SURFACE, [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]], [0, 0], [BUILDING_ID] * 2)
    sm = update_submap(None, GeFSet.empty(CORNER), dup, Pose.identity())
    assert len(sm.surfaces) == 1

    car = np.array([[5.0, 0.0, 0.0], [5.0, 2.0, 0.0]])
    sm = update_submap(None, GeFSet.empty(CORNER), GeFSet.empty(SURFACE), Pose.identity(), static_points=car)
    assert len(sm.surfaces) == 2

    far = GeFSet(SURFACE, [[200.0, 0, 0], [3.0, 0, 0]], [0, 0], [BUILDING_ID] * 2)
    sm = update_submap(None, GeFSet.empty(CORNER), far, Pose.identity(), radius=100.0)
    np.testing.assert_allclose(sm.surfaces.points, [[3.0, 0, 0]])


# ---------------------------------------------------------------- frame to frame


def test_frame_to_frame_identity_on_plane_interiors(rng):
    pts = []
    for axis, offset in ((0, 10.0), (1, -8.0), (2, -1.7)):
        p = rng.uniform(-4, 4, size=(200, 3))
        p[:, axis] = offset
        pts.append(p)
    pts = np.vstack(pts)
    surfaces = GeFSet(SURFACE, pts, np.zeros(len(pts)), np.full(len(pts), BUILDING_ID))
    feats = (GeFSet.empty(CORNER), surfaces)
    pose = match_frame_to_frame(feats, feats, Pose.identity())
    assert np.linalg.norm(pose.translation) < 1e-6
    np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-6)


@pytest.fixture(scope="module")
def corridor_features():
    sem, _ = corridor_scene(n_frames=1, range_noise=0.0).generate(0)
    return GeFExtractor().extract(sem)


def test_frame_to_frame_recovers_shift(corridor_features):
    corners, surfaces = corridor_features
    shift = np.array([0.1, 0.0, 0.0])
    moved = (corners.transformed(Pose(np.eye(3), -shift)), surfaces.transformed(Pose(np.eye(3), -shift)))
    pose = match_frame_to_frame(corridor_features, moved, Pose.identity())
    assert np.linalg.norm(pose.translation - shift) < 1e-3


def test_frame_to_frame_surfaces_only(corridor_features):
    _, surfaces = corridor_features
    shift = np.array([0.05, 0.02, 0.0])
    moved = (GeFSet.empty(CORNER), surfaces.transformed(Pose(np.eye(3), -shift)))
    pose = match_frame_to_frame((GeFSet.empty(CORNER), surfaces), moved, Pose.identity())
    assert np.linalg.norm(pose.translation - shift) < 1e-2
