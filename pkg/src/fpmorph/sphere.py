"""Fokker-Planck dynamics on a Voronoi tessellation of the unit sphere.

Geometry is exact: the convex hull of points on the sphere is their spherical
Delaunay triangulation, whose outward facet normals are the Voronoi vertices.
Each Delaunay edge ``(i, j)`` is dual to the Voronoi arc joining the
circumcentres of its two facets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError

from .diagnostics import ConvergenceReport, rel_rms_error

CACHE_VERSION = "fpmorph-tessellation-v1"
NORM_TOL = 1e-8
# Voronoi arcs shorter than this come from cocircular quadruples; the two cells
# only touch at a point and are not neighbours.
MIN_FACE_LENGTH = 1e-12


@dataclass
class SphereTessellation:
    """Voronoi cells of ``n`` generators on the unit sphere.

    Adjacency is stored as an edge list with ``edges[:, 0] < edges[:, 1]``;
    ``face_length`` is the geodesic length of the shared Voronoi arc and
    ``chord_dist`` the straight-line distance between the two generators.
    """

    points: np.ndarray
    cell_area: np.ndarray
    edges: np.ndarray
    face_length: np.ndarray
    chord_dist: np.ndarray
    seed: int | None = None
    iterations: int = 0
    _adj: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def geodesic_dist(self) -> np.ndarray:
        a = self.points[self.edges[:, 0]]
        b = self.points[self.edges[:, 1]]
        return np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b))

    def _sym(self, values) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        return sp.csr_matrix(
            (np.concatenate([values, values]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        )

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            self._adj = self._sym(np.ones(len(self.edges)))
        return self._adj

    @property
    def neighbors(self) -> list[np.ndarray]:
        A = self.adjacency
        return [A.indices[A.indptr[k] : A.indptr[k + 1]] for k in range(self.n)]

    def face_length_matrix(self) -> sp.csr_matrix:
        return self._sym(self.face_length)

    def chord_matrix(self) -> sp.csr_matrix:
        return self._sym(self.chord_dist)

    def is_connected(self) -> bool:
        ncomp, _ = connected_components(self.adjacency, directed=False)
        return ncomp == 1

    def area_std(self) -> float:
        return float(np.std(self.cell_area))


def _spherical_triangle_area(a, b, c):
    # Van Oosterom-Strackee; stable for the small triangles of fine tessellations
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denom = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2.0 * np.arctan2(triple, denom)


def _unit_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (n, 3) array")
    if len(pts) < 4:
        raise ValueError("a spherical tessellation needs at least 4 points")
    norms = np.linalg.norm(pts, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError("points must lie on the unit sphere")
    return pts / norms[:, None]


def _delaunay_dual(pts):
    """Delaunay facets, Voronoi vertices, and the Voronoi arc for every Delaunay edge."""
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise ValueError(f"degenerate point configuration (all on one great circle?): {exc}") from None
    if len(hull.vertices) != len(pts):
        raise ValueError("duplicate points: some generators are not hull vertices")
    # facet offsets are -distance of the plane from the origin; the origin must be strictly inside
    if np.max(hull.equations[:, 3]) > -1e-10:
        raise ValueError("points do not surround the origin (confined to a hemisphere?)")

    tri = hull.simplices.copy()
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, a + b + c) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    normal[flip] *= -1.0
    vor = normal / np.linalg.norm(normal, axis=1)[:, None]

    # each undirected Delaunay edge is shared by exactly two facets
    nt = len(tri)
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    owner = np.tile(np.arange(nt), 3)
    e.sort(axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    if len(e) % 2 or np.any(e[0::2] != e[1::2]):
        raise ValueError("hull is not a closed triangulated surface")
    edges = e[0::2]
    v1, v2 = vor[owner[0::2]], vor[owner[1::2]]
    return edges, v1, v2


def _cell_fans(pts, edges, v1, v2):
    """Per-edge fan triangle areas on both sides, plus cell areas."""
    n = len(pts)
    yi, yj = pts[edges[:, 0]], pts[edges[:, 1]]
    ai = _spherical_triangle_area(yi, v1, v2)
    aj = _spherical_triangle_area(yj, v1, v2)
    area = np.bincount(edges[:, 0], weights=ai, minlength=n) + np.bincount(edges[:, 1], weights=aj, minlength=n)
    return ai, aj, area


def sphere_voronoi_geometry(points, seed=None, iterations=0) -> SphereTessellation:
    pts = _unit_points(points)
    edges, v1, v2 = _delaunay_dual(pts)
    face = np.arctan2(np.linalg.norm(np.cross(v1, v2), axis=1), np.einsum("ij,ij->i", v1, v2))
    _, _, area = _cell_fans(pts, edges, v1, v2)
    keep = face > MIN_FACE_LENGTH
    edges, face = edges[keep], face[keep]
    chord = np.linalg.norm(pts[edges[:, 0]] - pts[edges[:, 1]], axis=1)
    if np.any(area <= 0):
        raise ValueError("degenerate Voronoi cell with zero area")
    return SphereTessellation(
        points=pts,
        cell_area=area,
        edges=edges.astype(np.int64),
        face_length=face,
        chord_dist=chord,
        seed=seed,
        iterations=iterations,
    )


def lloyd_step(pts: np.ndarray) -> np.ndarray:
    """Move every generator to the re-projected area-weighted centroid of its cell."""
    edges, v1, v2 = _delaunay_dual(pts)
    ai, aj, _ = _cell_fans(pts, edges, v1, v2)
    yi, yj = pts[edges[:, 0]], pts[edges[:, 1]]
    ci = (yi + v1 + v2) * (ai / 3.0)[:, None]
    cj = (yj + v1 + v2) * (aj / 3.0)[:, None]
    n = len(pts)
    cen = np.empty_like(pts)
    for d in range(3):
        cen[:, d] = np.bincount(edges[:, 0], weights=ci[:, d], minlength=n) + np.bincount(
            edges[:, 1], weights=cj[:, d], minlength=n
        )
    return cen / np.linalg.norm(cen, axis=1)[:, None]


def random_sphere_points(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3))
    return x / np.linalg.norm(x, axis=1)[:, None]


def cvt_sphere(n: int, iterations: int = 100, seed: int = 0) -> SphereTessellation:
    """Centroidal Voronoi tessellation by Lloyd iteration from seeded uniform samples."""
    if n < 4:
        raise ValueError("CVT on the sphere needs n >= 4")
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    pts = random_sphere_points(n, seed)
    for _ in range(iterations):
        pts = lloyd_step(pts)
    return sphere_voronoi_geometry(pts, seed=seed, iterations=iterations)


def save_tessellation(tess: SphereTessellation, path) -> None:
    """Write a self-describing ``.npz`` record; reading it back is bit-exact."""
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.array(CACHE_VERSION),
            n=np.array(tess.n),
            seed=np.array(-1 if tess.seed is None else tess.seed),
            iterations=np.array(tess.iterations),
            points=tess.points,
            cell_area=tess.cell_area,
            edges=tess.edges,
            face_length=tess.face_length,
            chord_dist=tess.chord_dist,
        )


def load_tessellation(path) -> SphereTessellation:
    with np.load(path, allow_pickle=False) as data:
        if "version" not in data.files:
            raise ValueError(f"{path} is not a tessellation cache")
        version = str(data["version"])
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported tessellation cache version {version!r}")
        seed = int(data["seed"])
        tess = SphereTessellation(
            points=data["points"].copy(),
            cell_area=data["cell_area"].copy(),
            edges=data["edges"].copy(),
            face_length=data["face_length"].copy(),
            chord_dist=data["chord_dist"].copy(),
            seed=None if seed < 0 else seed,
            iterations=int(data["iterations"]),
        )
        if int(data["n"]) != tess.n:
            raise ValueError("tessellation cache is inconsistent: n does not match points")
    return tess


# ---------------------------------------------------------------------------
# Markov jump process and explicit scheme


@dataclass
class MarkovRates:
    """Jump rates and transition matrix; ``p[i, j]`` is the probability of jumping j -> i."""

    lambda_i: np.ndarray
    p: sp.csr_matrix
    dt: float
    pt: sp.csr_matrix = field(repr=False, default=None)

    def __post_init__(self):
        if self.pt is None:
            self.pt = self.p.T.tocsr()

    @property
    def gain(self) -> np.ndarray:
        """``lambda*dt / (1 + lambda*dt)``, the relaxation weight of each cell."""
        ldt = self.lambda_i * self.dt
        return ldt / (1.0 + ldt)


@dataclass
class CloudDensity:
    values: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.values.shape != self.pi.shape or self.values.ndim != 1:
            raise ValueError("density and equilibrium must be 1-D arrays of equal length")


def _edge_distance(tess: SphereTessellation, distance: str) -> np.ndarray:
    if distance == "chord":
        return tess.chord_dist
    if distance == "geodesic":
        return tess.geodesic_dist
    raise ValueError(f"unknown distance convention {distance!r}")


def build_rates(tess: SphereTessellation, pi, dt: float, distance: str = "chord") -> MarkovRates:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (tess.n,):
        raise ValueError(f"equilibrium has shape {pi.shape}, expected ({tess.n},)")
    if not np.all(pi > 0):
        raise ValueError("equilibrium must be strictly positive")
    if not dt > 0:
        raise ValueError("time step must be positive")
    if not tess.is_connected():
        raise ValueError("tessellation adjacency is disconnected; the jump process is not ergodic")

    i, j = tess.edges[:, 0], tess.edges[:, 1]
    d = _edge_distance(tess, distance)
    area = tess.cell_area
    flux = (pi[i] + pi[j]) / d * tess.face_length
    lam = (np.bincount(i, weights=flux, minlength=tess.n) + np.bincount(j, weights=flux, minlength=tess.n)) / (
        2.0 * area * pi
    )
    # P_ij = (1/lambda_j) (pi_i + pi_j) / (2 pi_j |C_j|) |Gamma_ij| / |y_i - y_j|, for both orientations
    p_ij = flux / (2.0 * pi[j] * area[j] * lam[j])
    p_ji = flux / (2.0 * pi[i] * area[i] * lam[i])
    P = sp.csr_matrix(
        (np.concatenate([p_ij, p_ji]), (np.concatenate([i, j]), np.concatenate([j, i]))),
        shape=(tess.n, tess.n),
    )
    return MarkovRates(lambda_i=lam, p=P, dt=float(dt))


def upwind_rhs(tess: SphereTessellation, pi, rho, distance: str = "chord") -> np.ndarray:
    """Semi-discrete ``d/dt (rho_i |C_i|)`` straight from the upwind flux sum."""
    pi = np.asarray(pi, dtype=np.float64)
    u = np.asarray(rho, dtype=np.float64) / pi
    i, j = tess.edges[:, 0], tess.edges[:, 1]
    d = _edge_distance(tess, distance)
    f = 0.5 * (pi[i] + pi[j]) / d * tess.face_length * (u[j] - u[i])
    return np.bincount(i, weights=f, minlength=tess.n) - np.bincount(j, weights=f, minlength=tess.n)


def markov_rhs(tess: SphereTessellation, rates: MarkovRates, rho) -> np.ndarray:
    """The same semi-discrete rate as a forward equation of the jump process."""
    g = np.asarray(rho, dtype=np.float64) * tess.cell_area
    return rates.p @ (rates.lambda_i * g) - rates.lambda_i * g


def cloud_weights(tess: SphereTessellation, rates: MarkovRates) -> np.ndarray:
    """Per-cell mass weight ``(1 + lambda*dt) |C|``."""
    return (1.0 + rates.lambda_i * rates.dt) * tess.cell_area


def weighted_mass(rho, tess: SphereTessellation, rates: MarkovRates) -> float:
    return float(np.sum(cloud_weights(tess, rates) * np.asarray(rho)))


def mass_adjustment_factor(rho0, pi, tess: SphereTessellation, rates: MarkovRates) -> float:
    rho0 = np.asarray(rho0, dtype=np.float64)
    if not np.all(rho0 > 0):
        raise ValueError("initial density must be strictly positive")
    w = cloud_weights(tess, rates)
    return float(np.sum(w * np.asarray(pi)) / np.sum(w * rho0))


def adjust_initial_mass(rho0, pi, tess: SphereTessellation, rates: MarkovRates) -> np.ndarray:
    return mass_adjustment_factor(rho0, pi, tess, rates) * np.asarray(rho0, dtype=np.float64)


def step_values(rho: np.ndarray, pi: np.ndarray, rates: MarkovRates) -> np.ndarray:
    u = rho / pi
    u_next = u + rates.gain * (rates.pt @ u - u)
    return u_next * pi


def fp_step_cloud(rho_k: CloudDensity, rates: MarkovRates) -> CloudDensity:
    if rho_k.values.shape != rates.lambda_i.shape:
        raise ValueError("density length does not match the jump rates")
    return CloudDensity(step_values(rho_k.values, rho_k.pi, rates), rho_k.pi)


def run_cloud(
    rho0: CloudDensity,
    rates: MarkovRates,
    tess: SphereTessellation,
    n_steps: int,
    frame_stride: int = 1,
    sink=None,
    channel: str = "value",
) -> ConvergenceReport:
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    if frame_stride < 1:
        raise ValueError("frame_stride must be positive")
    pi = rho0.pi
    rho = rho0.values.copy()
    w = cloud_weights(tess, rates)
    report = ConvergenceReport(channels=[channel])

    def record(k):
        report.record(k, k * rates.dt, {channel: rel_rms_error(rho, pi)}, {channel: float(np.sum(w * rho))})

    record(0)
    _emit(sink, 0, 0.0, channel, rho)
    for k in range(1, n_steps + 1):
        rho = step_values(rho, pi, rates)
        record(k)
        if k % frame_stride == 0 or k == n_steps:
            _emit(sink, k, k * rates.dt, channel, rho)
    report.linear_steps = n_steps
    report.fit()
    return report


def _emit(sink, step, time, channel, rho):
    if sink is None:
        return
    try:
        sink.emit(step, time, {channel: rho.copy()})
    except OSError as exc:
        raise RuntimeError(f"frame sink failed at step {step}: {exc}") from exc


def lonlat_to_xyz(lon_deg, lat_deg) -> np.ndarray:
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_lonlat(points) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=float)
    lon = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    lat = np.degrees(np.arcsin(np.clip(p[:, 2], -1.0, 1.0)))
    return lon, lat


def cap_mask(tess: SphereTessellation, centers_lonlat, radius_deg) -> np.ndarray:
    """Boolean mask of cells whose generator lies within any of the given spherical caps."""
    centers = lonlat_to_xyz(*np.asarray(centers_lonlat, dtype=float).T).reshape(-1, 3)
    radii = np.broadcast_to(np.radians(np.asarray(radius_deg, dtype=float)), (len(centers),))
    cosd = tess.points @ centers.T
    return np.any(cosd >= np.cos(radii)[None, :], axis=1)


def total_area_error(tess: SphereTessellation) -> float:
    return abs(float(np.sum(tess.cell_area)) - 4.0 * math.pi) / (4.0 * math.pi)
