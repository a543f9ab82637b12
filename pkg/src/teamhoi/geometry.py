"""Planar geometry for formation scoring: perimeter sampling, convex hulls,
weighted centers of mass, principal inertia axes, boundary extents, support
polygons, and axis coverage.

All functions here are pure and operate on plain numpy arrays in double
precision. Points are (2,) float arrays unless noted; point lists are (n, 2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TABLETOP_HEIGHT_DEFAULT = 0.82
N_CONTACT_DEFAULT = 64

# relative eigenvalue gap below which the inertia is treated as isotropic
ISOTROPY_TOL = 1e-6
# grid resolution (m) used to sample interior mass points of analytic shapes
DENSITY_GRID_RES = 0.05

SHAPES = ("round", "square", "rectangle", "polygon")


class InvalidGeometryError(ValueError):
    """Raised for degenerate or self-intersecting table boundaries."""


def _as_point(p) -> np.ndarray:
    a = np.asarray(p, dtype=float).reshape(2)
    if not np.all(np.isfinite(a)):
        raise InvalidGeometryError(f"non-finite point {p!r}")
    return a


@dataclass
class TableSpec:
    """Object geometry plus mass weighting.

    ``dimensions`` is shape-dependent: diameter for ``round``, side length for
    ``square``, (length, width) for ``rectangle``, and an explicit (n, 2)
    counterclockwise vertex list for ``polygon``.
    """

    shape: str = "square"
    dimensions: tuple | float = 1.6
    tabletop_height: float = TABLETOP_HEIGHT_DEFAULT
    mass_scale: float = 1.0
    density_samples: list | None = None  # optional [(point, weight), ...]
    n_contact: int = N_CONTACT_DEFAULT

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidGeometryError(f"unknown table shape {self.shape!r}")
        if self.n_contact < 8:
            raise InvalidGeometryError("n_contact must be >= 8")
        if self.tabletop_height <= 0 or self.mass_scale <= 0:
            raise InvalidGeometryError("tabletop_height and mass_scale must be > 0")
        if self.shape == "round":
            self.dimensions = float(np.atleast_1d(self.dimensions)[0])
            if self.dimensions <= 0:
                raise InvalidGeometryError("diameter must be > 0")
        elif self.shape == "square":
            self.dimensions = float(np.atleast_1d(self.dimensions)[0])
            if self.dimensions <= 0:
                raise InvalidGeometryError("side length must be > 0")
        elif self.shape == "rectangle":
            dims = np.asarray(self.dimensions, dtype=float).reshape(2)
            if np.any(dims <= 0):
                raise InvalidGeometryError("rectangle dimensions must be > 0")
            self.dimensions = (float(dims[0]), float(dims[1]))
        else:
            verts = np.asarray(self.dimensions, dtype=float)
            if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
                raise InvalidGeometryError("polygon needs >= 3 (x, y) vertices")
            if not _polygon_is_simple(verts):
                raise InvalidGeometryError("polygon boundary is self-intersecting")
            if _signed_area(verts) < 0:
                verts = verts[::-1].copy()
            self.dimensions = verts
        if self.density_samples is not None:
            cleaned = []
            for p, w in self.density_samples:
                w = float(w)
                if w <= 0:
                    raise InvalidGeometryError("density weights must be > 0")
                cleaned.append((_as_point(p), w))
            if not cleaned:
                raise InvalidGeometryError("density_samples may not be empty")
            self.density_samples = cleaned

    def boundary_vertices(self) -> np.ndarray:
        """Counterclockwise boundary polyline of the tabletop outline.

        Round tables are represented by the n_contact-gon through the
        perimeter sample points.
        """
        if self.shape == "round":
            r = self.dimensions / 2.0
            ang = 2.0 * np.pi * np.arange(self.n_contact) / self.n_contact
            return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        if self.shape == "square":
            h = self.dimensions / 2.0
            return np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
        if self.shape == "rectangle":
            hx, hy = self.dimensions[0] / 2.0, self.dimensions[1] / 2.0
            return np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        return np.asarray(self.dimensions, dtype=float)

    def to_dict(self) -> dict:
        d = {
            "shape": self.shape,
            "tabletop_height": self.tabletop_height,
            "mass_scale": self.mass_scale,
            "n_contact": self.n_contact,
        }
        if self.shape == "polygon":
            d["dimensions"] = np.asarray(self.dimensions).tolist()
        elif self.shape == "rectangle":
            d["dimensions"] = list(self.dimensions)
        else:
            d["dimensions"] = self.dimensions
        if self.density_samples is not None:
            d["density_samples"] = [[list(p), w] for p, w in self.density_samples]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TableSpec":
        known = {"shape", "dimensions", "tabletop_height", "mass_scale",
                 "density_samples", "n_contact"}
        unknown = set(d) - known
        if unknown:
            raise InvalidGeometryError(f"unknown TableSpec fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "density_samples" in kwargs and kwargs["density_samples"] is not None:
            kwargs["density_samples"] = [(p, w) for p, w in kwargs["density_samples"]]
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "TableSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class PerimeterSampling:
    """Uniform arc-length samples of the table boundary, counterclockwise,
    with unit inward normals and the z of the lower tabletop edge."""

    points: np.ndarray  # (n, 2), table frame
    inward_normals: np.ndarray  # (n, 2), unit
    arc_spacing: float
    edge_height: float

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ConvexPolygon:
    """Counterclockwise convex polygon; degenerate point/segment forms are
    kept (with their distinct vertices) and flagged."""

    vertices: np.ndarray  # (k, 2)
    degenerate: bool = False


@dataclass
class PrincipalFrame:
    """Weighted COM, principal inertia axes (u1 has the smallest eigenvalue),
    and boundary extents along both directions of each axis."""

    com: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    lambda1: float
    lambda2: float
    extents: tuple  # (l1_pos, l1_neg, l2_pos, l2_neg)


def _signed_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    # proper intersection test; shared endpoints do not count
    d1 = _cross2(p4 - p3, p1 - p3)
    d2 = _cross2(p4 - p3, p2 - p3)
    d3 = _cross2(p2 - p1, p3 - p1)
    d4 = _cross2(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _polygon_is_simple(verts: np.ndarray) -> bool:
    n = len(verts)
    for i in range(n):
        a1, a2 = verts[i], verts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a1, a2, verts[j], verts[(j + 1) % n]):
                return False
    return True


def sample_perimeter(spec: TableSpec) -> PerimeterSampling:
    """Sample n_contact points at uniform arc length along the boundary,
    counterclockwise from a deterministic anchor.

    Round tables start at angle 0; square/rectangular tables start at the
    bottom-left corner. Each sample carries the unit inward normal of the
    boundary at its arc position (corner samples take the normal of the edge
    that begins there).
    """
    n = spec.n_contact
    if spec.shape == "round":
        r = spec.dimensions / 2.0
        ang = 2.0 * np.pi * np.arange(n) / n
        pts = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
        normals = -pts / r
        spacing = 2.0 * np.pi * r / n
        return PerimeterSampling(pts, normals, spacing, spec.tabletop_height)

    verts = spec.boundary_vertices()
    edges = np.roll(verts, -1, axis=0) - verts
    edge_len = np.linalg.norm(edges, axis=1)
    if np.any(edge_len <= 0):
        raise InvalidGeometryError("degenerate boundary edge")
    perimeter = float(edge_len.sum())
    spacing = perimeter / n
    cum = np.concatenate([[0.0], np.cumsum(edge_len)])

    pts = np.empty((n, 2))
    normals = np.empty((n, 2))
    tangents = edges / edge_len[:, None]
    # inward normal of a CCW boundary = tangent rotated +90 degrees
    inward = np.stack([-tangents[:, 1], tangents[:, 0]], axis=1)
    for k in range(n):
        s = k * spacing
        e = int(np.searchsorted(cum, s, side="right") - 1)
        e = min(e, len(verts) - 1)
        pts[k] = verts[e] + tangents[e] * (s - cum[e])
        normals[k] = inward[e]
    return PerimeterSampling(pts, normals, spacing, spec.tabletop_height)


def convex_hull(points) -> ConvexPolygon:
    """Minimal convex polygon containing the input points (monotone chain).

    Collinear input collapses to a flagged degenerate segment, a single
    distinct point to a degenerate one-vertex polygon.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise InvalidGeometryError("convex_hull of empty point set")
    uniq = sorted({(float(x), float(y)) for x, y in pts})
    if len(uniq) == 1:
        return ConvexPolygon(np.array(uniq), degenerate=True)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    if len(lower) == 2 and len(upper) == 2:
        # all points collinear: keep the two extreme points as a segment
        return ConvexPolygon(np.array([lower[0], lower[1]]), degenerate=True)
    return ConvexPolygon(np.array(lower[:-1] + upper[:-1]), degenerate=False)


def planar_com(samples) -> np.ndarray:
    """Weighted planar center of mass of [(point, weight), ...]."""
    if not samples:
        raise InvalidGeometryError("planar_com of empty sample set")
    pts = np.asarray([p for p, _ in samples], dtype=float)
    w = np.asarray([wk for _, wk in samples], dtype=float)
    if np.any(w <= 0):
        raise InvalidGeometryError("weights must be > 0")
    total = w.sum()
    if total <= 0:
        raise InvalidGeometryError("zero total weight")
    return (w[:, None] * pts).sum(axis=0) / total


def _fix_axis_sign(u: np.ndarray) -> np.ndarray:
    # flip so the larger-magnitude component is positive; ties favor +x
    if abs(u[0]) > abs(u[1]):
        return u if u[0] > 0 else -u
    if abs(u[1]) > abs(u[0]):
        return u if u[1] > 0 else -u
    return u if u[0] > 0 else -u


def planar_inertia(samples, c) -> np.ndarray:
    """2x2 planar inertia matrix about c: [[Ixx, Ixy], [Ixy, Iyy]] with
    Ixx = sum w*yt^2, Iyy = sum w*xt^2, Ixy = -sum w*xt*yt."""
    pts = np.asarray([p for p, _ in samples], dtype=float)
    w = np.asarray([wk for _, wk in samples], dtype=float)
    d = pts - np.asarray(c, dtype=float)
    ixx = float(np.sum(w * d[:, 1] ** 2))
    iyy = float(np.sum(w * d[:, 0] ** 2))
    ixy = -float(np.sum(w * d[:, 0] * d[:, 1]))
    return np.array([[ixx, ixy], [ixy, iyy]])


def principal_axes(samples, c):
    """Eigen-axes of the planar inertia matrix about c.

    Returns (u1, u2, lambda1, lambda2) with lambda1 <= lambda2 and u1 the
    eigenvector of the smallest eigenvalue. Near-isotropic inertia
    (|l2 - l1| < 1e-6 * (l1 + l2)) falls back to axis-aligned u1=(1,0),
    u2=(0,1); otherwise each axis is flipped so its larger-magnitude
    component is positive (ties to +x).
    """
    if len(samples) < 2:
        raise InvalidGeometryError("principal_axes needs >= 2 samples")
    pts = np.asarray([p for p, _ in samples], dtype=float)
    if np.allclose(pts, pts[0], atol=0.0):
        raise InvalidGeometryError("all samples coincident")
    inertia = planar_inertia(samples, c)
    evals, evecs = np.linalg.eigh(inertia)  # ascending eigenvalues
    l1, l2 = float(evals[0]), float(evals[1])
    if abs(l2 - l1) < ISOTROPY_TOL * (l1 + l2):
        return np.array([1.0, 0.0]), np.array([0.0, 1.0]), l1, l2
    u1 = _fix_axis_sign(evecs[:, 0].copy())
    u2 = _fix_axis_sign(evecs[:, 1].copy())
    return u1, u2, l1, l2


def support_distance(polygon: ConvexPolygon, c, direction) -> float:
    """Support-function distance max_p <p - c, direction> over the polygon's
    vertices. Negative when the polygon lies entirely behind c."""
    d = np.asarray(direction, dtype=float)
    rel = polygon.vertices - np.asarray(c, dtype=float)
    return float(np.max(rel @ d))


def boundary_extents(boundary_hull: ConvexPolygon, c, u1, u2):
    """Extents (l1+, l1-, l2+, l2-) from c to the boundary hull along both
    directions of each principal axis. c must lie strictly inside."""
    ext = (
        support_distance(boundary_hull, c, u1),
        support_distance(boundary_hull, c, -np.asarray(u1)),
        support_distance(boundary_hull, c, u2),
        support_distance(boundary_hull, c, -np.asarray(u2)),
    )
    if min(ext) <= 0:
        raise InvalidGeometryError("center of mass not strictly inside boundary hull")
    return ext


def nearest_perimeter_point(x, sampling: PerimeterSampling):
    """Index, point, inward normal, and planar distance of the sampled
    perimeter point nearest to x (ties to the lowest index)."""
    x = _as_point(x)
    d = np.linalg.norm(sampling.points - x, axis=1)
    k = int(np.argmin(d))
    return k, sampling.points[k], sampling.inward_normals[k], float(d[k])


def support_polygon(agent_roots, sampling: PerimeterSampling) -> ConvexPolygon:
    """Hull of the agents' perimeter projections, each widened to the sample
    points two indices to either side (mod n) to avoid degenerate lines."""
    pts = []
    n = len(sampling)
    for root in agent_roots:
        k, _, _, _ = nearest_perimeter_point(root, sampling)
        pts.append(sampling.points[(k - 2) % n])
        pts.append(sampling.points[(k + 2) % n])
    return convex_hull(np.asarray(pts))


def axis_coverage(support: ConvexPolygon, frame: PrincipalFrame):
    """Per-axis coverage of the support polygon around the COM.

    d_i+- are support-function distances along +-u_i, clipped at zero; the
    per-axis score g_i = min(d~_i+/l_i+, d~_i-/l_i-) is clamped to [0, 1] and
    the reward is their mean.
    """
    l1p, l1n, l2p, l2n = frame.extents
    d1p = max(0.0, support_distance(support, frame.com, frame.u1))
    d1n = max(0.0, support_distance(support, frame.com, -frame.u1))
    d2p = max(0.0, support_distance(support, frame.com, frame.u2))
    d2n = max(0.0, support_distance(support, frame.com, -frame.u2))
    g1 = min(1.0, min(d1p / l1p, d1n / l1n))
    g2 = min(1.0, min(d2p / l2p, d2n / l2n))
    return g1, g2, 0.5 * (g1 + g2)


def _analytic_density_grid(spec: TableSpec, res: float = DENSITY_GRID_RES):
    """Uniform unit-weight grid over the tabletop interior at `res` spacing,
    symmetric about the table frame origin."""
    verts = spec.boundary_vertices()
    xmax = np.abs(verts[:, 0]).max()
    ymax = np.abs(verts[:, 1]).max()
    nx = int(math.floor(xmax / res + 1e-9))
    ny = int(math.floor(ymax / res + 1e-9))
    xs = np.arange(-nx, nx + 1) * res
    ys = np.arange(-ny, ny + 1) * res
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if spec.shape == "round":
        r = spec.dimensions / 2.0
        mask = np.linalg.norm(grid, axis=1) <= r + 1e-12
    elif spec.shape in ("square", "rectangle"):
        hx = (spec.dimensions if spec.shape == "square" else spec.dimensions[0]) / 2.0
        hy = (spec.dimensions if spec.shape == "square" else spec.dimensions[1]) / 2.0
        mask = (np.abs(grid[:, 0]) <= hx + 1e-12) & (np.abs(grid[:, 1]) <= hy + 1e-12)
    else:
        from matplotlib.path import Path

        mask = Path(verts).contains_points(grid, radius=1e-9)
    return [(p, 1.0) for p in grid[mask]]


@dataclass
class TableGeometry:
    """Derived, table-frame geometry of a TableSpec: perimeter sampling,
    density samples, boundary hull, and the principal frame used by the
    coverage reward. Build once per table; all fields are immutable in use."""

    spec: TableSpec
    sampling: PerimeterSampling = field(init=False)
    density: list = field(init=False)
    boundary_hull: ConvexPolygon = field(init=False)
    frame: PrincipalFrame = field(init=False)

    def __post_init__(self):
        self.sampling = sample_perimeter(self.spec)
        if self.spec.density_samples is not None:
            self.density = list(self.spec.density_samples)
        else:
            self.density = _analytic_density_grid(self.spec)
        self.boundary_hull = convex_hull(self.spec.boundary_vertices())
        com = planar_com(self.density)
        u1, u2, l1, l2 = principal_axes(self.density, com)
        ext = boundary_extents(self.boundary_hull, com, u1, u2)
        self.frame = PrincipalFrame(com, u1, u2, l1, l2, ext)

    def coverage_support(self, agent_roots_table_frame) -> ConvexPolygon:
        return support_polygon(agent_roots_table_frame, self.sampling)

    def coverage(self, agent_roots_table_frame):
        """(g1, g2, r_cov) for agent roots given in the table frame."""
        sup = support_polygon(agent_roots_table_frame, self.sampling)
        return axis_coverage(sup, self.frame)
