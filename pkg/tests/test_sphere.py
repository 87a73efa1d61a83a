import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import SphericalVoronoi

from conftest import icosahedron_points, octahedron_points, random_tessellation
from fpmorph import sphere
from fpmorph.diagnostics import cloud_iteration_matrix, dense_operator_mu2, symmetric_mu2

OCTA_ARC = math.acos(1.0 / 3.0)


def girard_area(vertices):
    """Area of a convex spherical polygon as angle excess, vertices in cyclic order."""
    k = len(vertices)
    total = 0.0
    for a in range(k):
        prev, cur, nxt = vertices[a - 1], vertices[a], vertices[(a + 1) % k]
        t1 = prev - np.dot(prev, cur) * cur
        t2 = nxt - np.dot(nxt, cur) * cur
        total += math.acos(np.clip(np.dot(t1, t2) / np.linalg.norm(t1) / np.linalg.norm(t2), -1, 1))
    return total - (k - 2) * math.pi


def ico_cell0_vertices(pts):
    """Voronoi vertices of generator 0: circumcentres of the five faces around it."""
    d = pts @ pts[0]
    ring = np.argsort(-d)[1:6]
    verts = []
    for a in ring:
        for b in ring:
            if a < b and np.dot(pts[a], pts[b]) > 0.4:
                c = pts[0] + pts[a] + pts[b]
                verts.append(c / np.linalg.norm(c))
    z = pts[0]
    e1 = np.cross(z, [1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.cross(z, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(z, e1)
    verts.sort(key=lambda v: math.atan2(np.dot(v, e2), np.dot(v, e1)))
    return np.array(verts)


def explicit_rates(tess, pi, distance="chord"):
    """Jump rates and transition matrix by direct loops over neighbour pairs."""
    n = tess.n
    L = tess.face_length_matrix().toarray()
    D = tess.chord_matrix().toarray()
    if distance == "geodesic":
        D = np.arccos(np.clip(tess.points @ tess.points.T, -1, 1)) * (L > 0)
    area = tess.cell_area
    lam = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if L[i, j] > 0:
                lam[i] += (pi[i] + pi[j]) * L[i, j] / D[i, j]
        lam[i] /= 2 * area[i] * pi[i]
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if L[i, j] > 0:
                P[i, j] = (pi[i] + pi[j]) * L[i, j] / D[i, j] / (2 * pi[j] * area[j] * lam[j])
    return lam, P


class TestGeometry:
    def test_octahedron(self, octahedron):
        np.testing.assert_allclose(octahedron.cell_area, 4 * math.pi / 6, rtol=1e-12)
        assert all(len(nb) == 4 for nb in octahedron.neighbors)
        np.testing.assert_allclose(octahedron.face_length, OCTA_ARC, rtol=1e-12)
        np.testing.assert_allclose(octahedron.chord_dist, math.sqrt(2), rtol=1e-14)

    def test_icosahedron(self, icosahedron):
        np.testing.assert_allclose(icosahedron.cell_area, 4 * math.pi / 12, rtol=1e-12)
        assert all(len(nb) == 5 for nb in icosahedron.neighbors)

    def test_icosahedron_cell_by_angle_excess(self, icosahedron):
        verts = ico_cell0_vertices(icosahedron_points())
        assert len(verts) == 5
        area = girard_area(verts)
        assert area == pytest.approx(math.pi / 3, rel=1e-12)
        assert icosahedron.cell_area[0] == pytest.approx(area, rel=1e-12)

    def test_face_matrices_symmetric(self, cloud300):
        for M in (cloud300.face_length_matrix(), cloud300.chord_matrix()):
            assert abs(M - M.T).max() == 0.0
        assert np.all(cloud300.edges[:, 0] < cloud300.edges[:, 1])

    def test_geodesic_exceeds_chord(self, cloud300):
        g, c = cloud300.geodesic_dist, cloud300.chord_dist
        assert np.all(g >= c)
        np.testing.assert_allclose(c, 2 * np.sin(g / 2), rtol=1e-12)

    def test_areas_match_scipy(self, cloud300):
        sv = SphericalVoronoi(cloud300.points)
        np.testing.assert_allclose(cloud300.cell_area, sv.calculate_areas(), rtol=1e-10)

    def test_neighbours_match_scipy(self, cloud300):
        sv = SphericalVoronoi(cloud300.points)
        for i in (0, 17, 299):
            shared = {
                j for j in range(cloud300.n) if j != i and len(set(sv.regions[i]) & set(sv.regions[j])) >= 2
            }
            assert shared == set(cloud300.neighbors[i].tolist())

    @pytest.mark.parametrize("n", [4, 12, 57, 300])
    def test_total_area(self, n):
        tess = random_tessellation(np.random.default_rng(n), n)
        assert sphere.total_area_error(tess) < 1e-12

    def test_connected(self, cloud300):
        assert cloud300.is_connected()

    def test_rejects_too_few(self):
        with pytest.raises(ValueError):
            sphere.sphere_voronoi_geometry(np.eye(3))

    def test_rejects_duplicates(self):
        pts = np.vstack([octahedron_points(), [[1.0, 0.0, 0.0]]])
        with pytest.raises(ValueError):
            sphere.sphere_voronoi_geometry(pts)

    def test_rejects_off_sphere(self):
        pts = octahedron_points() * 1.01
        with pytest.raises(ValueError):
            sphere.sphere_voronoi_geometry(pts)

    def test_rejects_hemisphere(self):
        ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        pts = np.stack([np.cos(ang) * 0.6, np.sin(ang) * 0.6, np.full(8, 0.8)], axis=1)
        with pytest.raises(ValueError):
            sphere.sphere_voronoi_geometry(pts)

    def test_rejects_great_circle(self):
        ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        pts = np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], axis=1)
        with pytest.raises(ValueError):
            sphere.sphere_voronoi_geometry(pts)


class TestCVT:
    def test_four_points_equal_areas(self):
        tess = sphere.cvt_sphere(4, iterations=200, seed=0)
        np.testing.assert_allclose(tess.cell_area, math.pi, rtol=0.05)

    def test_lloyd_reduces_spread(self):
        before = sphere.cvt_sphere(200, iterations=0, seed=2).area_std()
        after = sphere.cvt_sphere(200, iterations=30, seed=2).area_std()
        assert after < 0.5 * before

    def test_seeded(self):
        a = sphere.cvt_sphere(50, iterations=5, seed=9)
        b = sphere.cvt_sphere(50, iterations=5, seed=9)
        np.testing.assert_array_equal(a.points, b.points)

    def test_cache_round_trip(self, tmp_path):
        tess = sphere.cvt_sphere(60, iterations=3, seed=4)
        path = tmp_path / "t.npz"
        sphere.save_tessellation(tess, path)
        back = sphere.load_tessellation(path)
        for name in ("points", "cell_area", "edges", "face_length", "chord_dist"):
            np.testing.assert_array_equal(getattr(back, name), getattr(tess, name))
        assert (back.seed, back.iterations) == (4, 3)

    def test_cache_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, points=np.eye(3))
        with pytest.raises(ValueError):
            sphere.load_tessellation(path)


class TestRates:
    def test_octahedron_uniform(self, octahedron):
        rates = sphere.build_rates(octahedron, np.ones(6), 0.05)
        lam = 4 * OCTA_ARC / (math.sqrt(2) * 4 * math.pi / 6)
        np.testing.assert_allclose(rates.lambda_i, lam, rtol=1e-12)
        P = rates.p.toarray()
        A = octahedron.adjacency.toarray()
        np.testing.assert_allclose(P, A / 4, rtol=1e-12, atol=0)

    @pytest.mark.parametrize("distance", ["chord", "geodesic"])
    def test_matches_explicit_loops(self, icosahedron, distance):
        pi = np.where(np.arange(12) % 2 == 0, 0.9, 0.1)
        rates = sphere.build_rates(icosahedron, pi, 0.05, distance)
        lam, P = explicit_rates(icosahedron, pi, distance)
        np.testing.assert_allclose(rates.lambda_i, lam, rtol=1e-13)
        np.testing.assert_allclose(rates.p.toarray(), P, rtol=1e-13, atol=0)

    def test_detailed_balance_icosahedron(self, icosahedron):
        pi = np.where(np.arange(12) % 2 == 0, 0.9, 0.1)
        rates = sphere.build_rates(icosahedron, pi, 0.05)
        P = rates.p.toarray()
        flow = P * (rates.lambda_i * pi * icosahedron.cell_area)[None, :]
        assert np.max(np.abs(flow - flow.T)) <= 1e-12 * np.max(flow)

    def test_columns_stochastic(self, cloud300):
        pi = np.random.default_rng(0).uniform(0.1, 1, 300)
        rates = sphere.build_rates(cloud300, pi, 0.1)
        np.testing.assert_allclose(np.asarray(rates.p.sum(axis=0)).ravel(), 1.0, atol=1e-12)

    def test_rejects_nonpositive_pi(self, octahedron):
        with pytest.raises(ValueError):
            sphere.build_rates(octahedron, np.array([1, 1, 1, 1, 1, 0.0]), 0.1)

    def test_rejects_disconnected(self, octahedron):
        keep = ~np.any(octahedron.edges == 0, axis=1)
        cut = sphere.SphereTessellation(
            octahedron.points,
            octahedron.cell_area,
            octahedron.edges[keep],
            octahedron.face_length[keep],
            octahedron.chord_dist[keep],
        )
        with pytest.raises(ValueError):
            sphere.build_rates(cut, np.ones(6), 0.1)

    def test_unknown_distance(self, octahedron):
        with pytest.raises(ValueError):
            sphere.build_rates(octahedron, np.ones(6), 0.1, distance="manhattan")

    def test_flux_and_markov_forms_agree(self, cloud300):
        rng = np.random.default_rng(5)
        pi = rng.uniform(0.1, 1, 300)
        rho = rng.uniform(0.1, 1, 300)
        rates = sphere.build_rates(cloud300, pi, 0.1)
        a = sphere.upwind_rhs(cloud300, pi, rho)
        b = sphere.markov_rhs(cloud300, rates, rho)
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13 * np.abs(a).max())


class TestCloudStep:
    def test_equilibrium_fixed(self, cloud300):
        pi = np.random.default_rng(1).uniform(0.1, 1, 300)
        rates = sphere.build_rates(cloud300, pi, 10.0)
        np.testing.assert_allclose(sphere.step_values(pi, pi, rates), pi, rtol=1e-14)

    def test_octahedron_delta_by_hand(self, octahedron):
        dt = 0.05
        rates = sphere.build_rates(octahedron, np.ones(6), dt)
        g = rates.lambda_i[0] * dt
        rho = np.zeros(6)
        rho[0] = 1.0
        out = sphere.step_values(rho, np.ones(6), rates)
        assert out[0] == pytest.approx(1 / (1 + g), rel=1e-14)
        assert out[3] == 0.0  # antipode of +x is -x
        for j in (1, 2, 4, 5):
            assert out[j] == pytest.approx(g / 4 / (1 + g), rel=1e-14)
        M = cloud_iteration_matrix(rates.lambda_i, rates.p, dt)
        np.testing.assert_allclose(out, M @ rho, rtol=1e-14, atol=1e-17)

    def test_octahedron_mu2_closed_form(self, octahedron):
        dt = 0.05
        rates = sphere.build_rates(octahedron, np.ones(6), dt)
        lam = 4 * OCTA_ARC / (math.sqrt(2) * 4 * math.pi / 6)
        assert lam == pytest.approx(1.6624, abs=1e-4)
        expected = 1 / (1 + lam * dt)
        assert dense_operator_mu2((rates, octahedron, np.ones(6))) == pytest.approx(expected, rel=1e-12)
        M = cloud_iteration_matrix(rates.lambda_i, rates.p, dt)
        w = (1 + rates.lambda_i * dt) * octahedron.cell_area
        assert symmetric_mu2(M, w) == pytest.approx(expected, rel=1e-12)

    @given(n=st.integers(6, 60), seed=st.integers(0, 2**31), logdt=st.floats(-4, 2))
    @settings(max_examples=30, deadline=None)
    def test_step_properties(self, n, seed, logdt):
        rng = np.random.default_rng(seed)
        tess = random_tessellation(rng, n)
        pi = rng.uniform(0.05, 5, n)
        rho = rng.uniform(0.05, 5, n)
        rates = sphere.build_rates(tess, pi, 10**logdt)
        out = sphere.step_values(rho, pi, rates)
        u0, u1 = rho / pi, out / pi
        assert np.all(out > 0)
        assert sphere.weighted_mass(out, tess, rates) == pytest.approx(sphere.weighted_mass(rho, tess, rates), rel=1e-12)
        assert u1.max() <= u0.max() and u1.min() >= u0.min()
        assert np.abs(u1 - 1).max() <= np.abs(u0 - 1).max()
        M = cloud_iteration_matrix(rates.lambda_i, rates.p, rates.dt)
        np.testing.assert_allclose(u1, M @ u0, rtol=1e-12)

    def test_self_adjoint_in_weight(self, icosahedron):
        pi = np.linspace(0.2, 1.5, 12)
        rates = sphere.build_rates(icosahedron, pi, 0.3)
        M = cloud_iteration_matrix(rates.lambda_i, rates.p, 0.3)
        w = (1 + rates.lambda_i * 0.3) * pi * icosahedron.cell_area
        S = w[:, None] * M
        np.testing.assert_allclose(S, S.T, rtol=1e-12, atol=1e-15)

    def test_mass_adjustment(self, icosahedron):
        pi = np.linspace(0.2, 1.5, 12)
        rates = sphere.build_rates(icosahedron, pi, 0.3)
        assert sphere.mass_adjustment_factor(3 * pi, pi, icosahedron, rates) == pytest.approx(1 / 3, rel=1e-14)

    def test_length_mismatch(self, octahedron):
        rates = sphere.build_rates(octahedron, np.ones(6), 0.1)
        with pytest.raises(ValueError):
            sphere.fp_step_cloud(sphere.CloudDensity(np.ones(5), np.ones(5)), rates)


class TestRunCloud:
    def test_at_equilibrium(self, icosahedron):
        pi = np.linspace(0.2, 1.5, 12)
        rates = sphere.build_rates(icosahedron, pi, 0.1)
        rep = sphere.run_cloud(sphere.CloudDensity(pi, pi), rates, icosahedron, 30)
        assert max(rep.errors["value"]) < 1e-13

    def test_mass_and_frames(self, icosahedron, tmp_path):
        from fpmorph.media import CloudFrameSink

        rng = np.random.default_rng(2)
        pi = rng.uniform(0.2, 1, 12)
        rates = sphere.build_rates(icosahedron, pi, 0.1)
        rho = sphere.adjust_initial_mass(rng.uniform(0.2, 1, 12), pi, icosahedron, rates)
        sink = CloudFrameSink(tmp_path)
        rep = sphere.run_cloud(sphere.CloudDensity(rho, pi), rates, icosahedron, 40, 20, sink)
        m = np.array(rep.mass["value"])
        np.testing.assert_allclose(m, m[0], rtol=1e-13)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "frame_000000.csv",
            "frame_000020.csv",
            "frame_000040.csv",
        ]
        assert np.all(np.diff(rep.errors["value"]) <= 0)


class TestLonLat:
    @given(st.floats(-179, 179), st.floats(-89, 89))
    def test_round_trip(self, lon, lat):
        p = sphere.lonlat_to_xyz(lon, lat)[None, :]
        lo, la = sphere.xyz_to_lonlat(p)
        assert lo[0] == pytest.approx(lon, abs=1e-9) and la[0] == pytest.approx(lat, abs=1e-9)

    def test_cap_mask(self, octahedron):
        mask = sphere.cap_mask(octahedron, [(0.0, 90.0)], 10.0)
        assert mask.tolist() == [False, False, True, False, False, False]
