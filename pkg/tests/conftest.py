import numpy as np
import pytest

from psflo.io import PointCloud, TaxonomyMap, partition

CLASS_OF_ROLE = {"road": 40, "building": 50, "sign": 81, "pole": 80, "terrain": 72, "object": 10, "other": 0}


def make_sem(frame_index=0, ring=None, **points_by_role):
    """Semantic cloud from per-role point arrays, e.g. ``make_sem(road=pts)``."""
    chunks, classes = [], []
    for role, pts in points_by_role.items():
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        chunks.append(pts)
        classes.append(np.full(len(pts), CLASS_OF_ROLE[role]))
    xyz = np.vstack(chunks) if chunks else np.empty((0, 3))
    cls = np.concatenate(classes) if classes else np.empty(0)
    cloud = PointCloud(xyz, frame_index=frame_index, ring=ring)
    return partition(cloud, (cls, np.zeros(len(cls))), TaxonomyMap.default())


def grid_on_plane(origin, u, v, nu, nv):
    """Regular grid of points origin + i*u/(nu-1) + j*v/(nv-1)."""
    origin, u, v = (np.asarray(a, dtype=float) for a in (origin, u, v))
    a = np.linspace(0, 1, nu)
    b = np.linspace(0, 1, nv)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    return origin + aa.reshape(-1, 1) * u + bb.reshape(-1, 1) * v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict = {}


def record_criterion(number: int, ok, detail: str) -> None:
    """Store a criterion outcome (True, False or None for skipped) for the terminal summary."""
    ACCEPTANCE[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
