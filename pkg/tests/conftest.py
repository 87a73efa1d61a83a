import math

import numpy as np
import pytest

from fpmorph import sphere


def octahedron_points():
    e = np.eye(3)
    return np.vstack([e, -e])


def icosahedron_points():
    g = (1 + math.sqrt(5)) / 2
    pts = []
    for a in (-1, 1):
        for b in (-g, g):
            pts += [(0, a, b), (a, b, 0), (b, 0, a)]
    pts = np.array(pts, dtype=float)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def octahedron():
    return sphere.sphere_voronoi_geometry(octahedron_points())


@pytest.fixture(scope="session")
def icosahedron():
    return sphere.sphere_voronoi_geometry(icosahedron_points())


@pytest.fixture(scope="session")
def cloud300():
    return sphere.sphere_voronoi_geometry(sphere.random_sphere_points(300, seed=1))


def random_tessellation(rng, n):
    """Random generators; redraws the rare sets confined to a hemisphere."""
    while True:
        try:
            return sphere.sphere_voronoi_geometry(sphere.random_sphere_points(n, int(rng.integers(2**31))))
        except ValueError:
            continue


_ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
