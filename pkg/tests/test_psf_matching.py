import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psflo.exceptions import DegenerateLine, EmptySet
from psflo.extraction import PSFFrame
from psflo.geometry import (
    BUILDING,
    POLE,
    PSF,
    ROAD,
    LineCPN,
    PlaneCP,
    Pose,
    compose,
    invert,
    retract,
    so3_log,
    transform_psf,
)
from psflo.psf_matching import (
    LineErrorBlock,
    PlaneErrorBlock,
    PSFMatcher,
    find_correspondence,
    line_error,
    plane_error,
    solve_map_pose,
    update_psf_submap,
    weighted_average_psf,
)


def plane_psf(normal, distance, center, label=BUILDING, weight=1.0):
    n = np.asarray(normal, dtype=float)
    n /= np.linalg.norm(n)
    return PSF(PlaneCP(distance * n), weight, label, center, [center])


def pole_psf(x, y, weight=1.0, direction=(0, 0, 1)):
    return PSF(LineCPN.through([x, y, 0.0], direction), weight, POLE, [x, y, 0.5], [[x, y, -1.5], [x, y, 2.5]])


def street_world():
    """Exact world PSFs: road, walls on both sides, two cross walls and poles."""
    psfs = [plane_psf([0, 0, -1], 1.73, [x, y, -1.73], ROAD) for x in (-10, 0, 10) for y in (-3, 3)]
    psfs += [plane_psf([0, 1, 0], 9.0, [x, 9.0, 1.0]) for x in (-12, 0, 12)]
    psfs += [plane_psf([0, -1, 0], 8.0, [x, -8.0, 1.0]) for x in (-12, 0, 12)]
    psfs += [plane_psf([1, 0, 0], 14.0, [14.0, 4.0, 1.0]), plane_psf([-1, 0, 0], 15.0, [-15.0, -5.0, 1.0])]
    psfs += [pole_psf(x, s * 6.0) for x in (-9.0, 3.0, 11.0) for s in (-1, 1)]
    return psfs


def sources_at(world, pose):
    inv = invert(pose)
    return PSFFrame(tuple(transform_psf(p, inv) for p in world), 0)


def central_fd(block, pose, h=1e-6):
    _, J = block.evaluate(pose)
    Jn = np.zeros_like(J)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        Jn[:, :, k] = (block.evaluate(retract(pose, e))[0] - block.evaluate(retract(pose, -e))[0]) / (2 * h)
    return np.max(np.abs(J - Jn)) / max(np.max(np.abs(Jn)), 1e-12)


# ---------------------------------------------------------------- submap


def test_submap_first_frame_and_eviction():
    frame = PSFFrame(tuple(street_world()), 0)
    sm = update_psf_submap(None, frame, Pose.identity())
    assert len(sm) == len(frame.psfs) == sm.index_size
    far = Pose(np.eye(3), [150.0, 0, 0])
    sm = update_psf_submap(sm, PSFFrame((plane_psf([0, 0, -1], 1.73, [150, 0, -1.73], ROAD),), 1), far)
    assert len(sm) == 1 == sm.index_size


# ---------------------------------------------------------------- correspondences


def test_correspondence_finds_identical_psf():
    world = street_world()
    sm = update_psf_submap(None, PSFFrame(tuple(world), 0), Pose.identity())
    c = find_correspondence(world[0], Pose.identity(), sm)
    assert c is not None and any(n is world[0] or np.allclose(n.center, world[0].center) for n in c.neighbors)


def test_correspondence_out_of_radius_and_label_filter():
    road = plane_psf([0, 0, -1], 1.73, [0, 0, -1.73], ROAD)
    moved = plane_psf([0, 0, -1], 1.73, [6.0, 0, -1.73], ROAD)  # 2x the 3 m road radius
    sm = update_psf_submap(None, PSFFrame((moved,), 0), Pose.identity())
    assert find_correspondence(road, Pose.identity(), sm) is None
    poles = update_psf_submap(None, PSFFrame((pole_psf(0.0, 0.5),), 0), Pose.identity())
    assert find_correspondence(plane_psf([0, 0, -1], 1.73, [0, 0.5, 0.5], ROAD), Pose.identity(), poles) is None


# ---------------------------------------------------------------- weighted average


def test_weighted_average_examples():
    a = plane_psf([0, 0, 1], 2.0, [0, 0, 2], weight=1.0)
    b = plane_psf([0, 0.1, 1], 3.0, [1, 0, 3], weight=1.0)
    assert np.allclose(weighted_average_psf([a]).coefficients.coefficients, a.coefficients.coefficients)
    mean = weighted_average_psf([a, b]).coefficients.coefficients
    np.testing.assert_allclose(mean, 0.5 * (a.coefficients.coefficients + b.coefficients.coefficients))
    b3 = plane_psf([0, 0.1, 1], 3.0, [1, 0, 3], weight=3.0)
    avg = weighted_average_psf([a, b3])
    np.testing.assert_allclose(avg.coefficients.coefficients,
                               (a.coefficients.coefficients + 3 * b3.coefficients.coefficients) / 4)
    assert avg.weight == pytest.approx(2.0)
    with pytest.raises(EmptySet):
        weighted_average_psf([])


def test_weighted_average_pole_direction_is_unit():
    avg = weighted_average_psf([pole_psf(1, 1), pole_psf(1.1, 1, direction=(0.1, 0, 1))])
    assert np.linalg.norm(avg.coefficients.direction) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_weighted_average_idempotent_and_order_invariant(seed, n):
    rng = np.random.default_rng(seed)
    psfs = [plane_psf(rng.normal(size=3), rng.uniform(1, 20), rng.normal(size=3), weight=rng.uniform(0.3, 1))
            for _ in range(n)]
    same = weighted_average_psf([psfs[0]] * n)
    np.testing.assert_allclose(same.coefficients.coefficients, psfs[0].coefficients.coefficients, atol=1e-12)
    fwd = weighted_average_psf(psfs).coefficients.coefficients
    rev = weighted_average_psf(psfs[::-1]).coefficients.coefficients
    np.testing.assert_allclose(fwd, rev, atol=1e-12)


# ---------------------------------------------------------------- plane and line errors


def test_plane_error_examples():
    pose = Pose.from_rotvec([0.1, -0.2, 0.3], [1.0, 2.0, 0.5])
    src = plane_psf([0.3, 0.2, 1.0], 4.0, [0, 0, 4])
    avg = transform_psf(src, pose)
    r, _ = plane_error(src, avg, pose).evaluate(pose)
    assert np.linalg.norm(r) < 1e-12

    n_world = avg.coefficients.normal
    off = Pose(pose.rotation, pose.translation + 0.1 * n_world)
    r, _ = plane_error(src, avg, off).evaluate(off)
    assert np.linalg.norm(r) == pytest.approx(0.1, abs=1e-9)

    half = plane_psf([0.3, 0.2, 1.0], 4.0, [0, 0, 4], weight=0.5)
    r2, _ = plane_error(half, avg, off).evaluate(off)
    assert np.linalg.norm(r2) == pytest.approx(0.05, abs=1e-9)


def test_line_error_exact_and_monotone_lateral_offset():
    src = pole_psf(5.0, 0.0)
    r, _ = line_error(src, src, Pose.identity()).evaluate(Pose.identity())
    assert np.linalg.norm(r) < 1e-12
    norms = []
    for dy in np.linspace(0, 0.5, 11):
        pose = Pose(np.eye(3), [0.0, dy, 0.0])
        norms.append(np.linalg.norm(line_error(src, src, pose).evaluate(pose)[0]))
    assert norms[0] < 1e-12 and norms[1] > 0
    assert all(b > a for a, b in zip(norms, norms[1:]))


def test_line_error_independent_of_average_direction_sign():
    src = pole_psf(5.0, 1.0, direction=(0.05, 0.02, 1.0))
    avg = pole_psf(5.1, 1.0, direction=(0.04, 0.02, 1.0))
    flipped = PSF(LineCPN(avg.coefficients.point, -avg.coefficients.direction), 1.0, POLE, avg.center, avg.outline)
    pose = Pose.from_rotvec([0.01, 0, 0.02], [0.1, 0, 0])
    r1, _ = line_error(src, avg, pose).evaluate(pose)
    r2, _ = line_error(src, flipped, pose).evaluate(pose)
    np.testing.assert_allclose(r1, r2, atol=1e-12)


def test_line_error_degenerate_line_propagates():
    through_origin = PSF(LineCPN.through([0, 0, 0], [0, 0, 1]), 1.0, POLE, [0, 0, 0], [[0, 0, 0]])
    with pytest.raises(DegenerateLine):
        line_error(through_origin, through_origin, Pose.identity())


def test_psf_jacobians_match_central_differences(rng):
    for _ in range(200):
        pose = Pose.from_rotvec(rng.normal(scale=0.3, size=3), rng.normal(size=3))
        m = 3
        c = rng.normal(size=(m, 3)) * 5
        plane = PlaneErrorBlock(c, c + rng.normal(size=(m, 3)) * 0.1, rng.uniform(0.2, 1, m))
        src = [LineCPN.through(rng.normal(size=3) * 5, rng.normal(size=3)) for _ in range(m)]
        avg = [LineCPN.through(rng.normal(size=3) * 5, rng.normal(size=3)) for _ in range(m)]
        line = LineErrorBlock(src, avg, rng.uniform(0.2, 1, m))
        assert central_fd(plane, pose) < 1e-5
        assert central_fd(line, pose) < 1e-5


# ---------------------------------------------------------------- joint solve


def _solve(world, truth, init, matcher):
    sm = update_psf_submap(None, PSFFrame(tuple(world), 0), Pose.identity())
    frame = sources_at(world, truth)
    return solve_map_pose([], lambda pose: matcher.build_blocks(frame, sm, pose), init, outer_iterations=6,
                          translation_tol=1e-8, rotation_tol=1e-9)


def test_solve_at_ground_truth_stays():
    truth = Pose.from_rotvec([0, 0, 0.1], [1.0, 0.5, 0.0])
    res = _solve(street_world(), truth, truth, PSFMatcher())
    assert res.ok
    assert np.linalg.norm(res.pose.translation - truth.translation) < 1e-4


def test_solve_recovers_perturbed_pose():
    truth = Pose.from_rotvec([0, 0, 0.1], [1.0, 0.5, 0.0])
    init = compose(truth, Pose.from_rotvec(np.radians([0.0, 0.0, 2.0]), [0.3, 0.0, 0.0]))
    # the default gates are sized for odometry-scale errors; this init is far outside them
    matcher = PSFMatcher(max_residual=None, max_offset=1.0)
    res = _solve(street_world(), truth, init, matcher)
    assert res.ok
    assert np.linalg.norm(res.pose.translation - truth.translation) < 5e-3
    angle = np.degrees(np.linalg.norm(so3_log(res.pose.rotation @ truth.rotation.T)))
    assert angle < 0.05


def test_poles_only_is_degenerate():
    world = [p for p in street_world() if p.label == POLE]
    truth = Pose.identity()
    res = _solve(world, truth, Pose(np.eye(3), [0.05, 0, 0]), PSFMatcher())
    assert res.degenerate


def test_gain_zero_builds_no_blocks():
    world = street_world()
    sm = update_psf_submap(None, PSFFrame(tuple(world), 0), Pose.identity())
    assert PSFMatcher(psf_gain=0.0).build_blocks(sources_at(world, Pose.identity()), sm, Pose.identity()) == []


def test_residual_gate_drops_far_correspondences():
    world = street_world()
    sm = update_psf_submap(None, PSFFrame(tuple(world), 0), Pose.identity())
    frame = sources_at(world, Pose.identity())
    pose = Pose(np.eye(3), [0.0, 0.0, 0.3])
    loose = PSFMatcher(max_residual=None).build_blocks(frame, sm, pose)
    tight = PSFMatcher(max_residual=0.2).build_blocks(frame, sm, pose)
    assert sum(len(b) for b in tight) < sum(len(b) for b in loose)
