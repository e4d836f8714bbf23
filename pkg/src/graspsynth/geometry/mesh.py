"""Triangle meshes: loading-time cleaning, SDF queries, surface sampling.

Signed distance magnitude comes from exact closest-point-on-triangle
queries; the sign comes from the generalized winding number (threshold
0.5), which stays robust on the imperfect meshes this pipeline ingests.
Outward normals rely on consistent counter-clockwise winding; fixture
meshes are authored that way.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .bvh import BVH, closest_point_on_triangles

log = logging.getLogger(__name__)

_DEGENERATE_AREA = 1e-12  # m^2
# brute-force all-triangle bulk queries below this face count; BVH above
_BULK_BRUTE_FACES = 4096
_CHUNK_PAIRS = 200000


class NearestPoint(NamedTuple):
    point: np.ndarray
    normal: np.ndarray
    face: int
    bary: np.ndarray


class TriangleMesh:
    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

        a = self.vertices[faces[:, 0]]
        cross = np.cross(self.vertices[faces[:, 1]] - a, self.vertices[faces[:, 2]] - a)
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        keep = areas > _DEGENERATE_AREA
        self.n_degenerate_dropped = int((~keep).sum())
        if self.n_degenerate_dropped:
            log.warning("dropped %d degenerate triangles", self.n_degenerate_dropped)
        self.faces = faces[keep]
        if len(self.faces) == 0:
            raise ValueError("mesh has no non-degenerate triangles")

        self.face_areas = areas[keep]
        self.face_normals = cross[keep] / (2.0 * self.face_areas[:, None])
        self._bvh = None
        self._vertex_normals = None
        self._edge_normals = None

    @property
    def tri_corners(self):
        f = self.faces
        return self.vertices[f[:, 0]], self.vertices[f[:, 1]], self.vertices[f[:, 2]]

    @property
    def bvh(self) -> BVH:
        if self._bvh is None:
            self._bvh = BVH(*self.tri_corners)
        return self._bvh

    @property
    def vertex_normals(self) -> np.ndarray:
        """Angle-weighted pseudo-normals per vertex."""
        if self._vertex_normals is None:
            acc = np.zeros_like(self.vertices)
            a, b, c = self.tri_corners
            corners = (a, b, c)
            for i in range(3):
                p = corners[i]
                e1 = corners[(i + 1) % 3] - p
                e2 = corners[(i + 2) % 3] - p
                cosang = np.einsum("ij,ij->i", e1, e2) / (
                    np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
                )
                ang = np.arccos(np.clip(cosang, -1.0, 1.0))
                np.add.at(acc, self.faces[:, i], ang[:, None] * self.face_normals)
            norms = np.linalg.norm(acc, axis=1)
            norms[norms < 1e-20] = 1.0
            self._vertex_normals = acc / norms[:, None]
        return self._vertex_normals

    def edge_normal(self, v0: int, v1: int) -> np.ndarray:
        if self._edge_normals is None:
            table: dict = {}
            for fi, f in enumerate(self.faces):
                for i in range(3):
                    key = (min(f[i], f[(i + 1) % 3]), max(f[i], f[(i + 1) % 3]))
                    table.setdefault(key, []).append(fi)
            self._edge_normals = {
                key: _normalize(self.face_normals[fids].sum(axis=0))
                for key, fids in table.items()
            }
        key = (min(v0, v1), max(v0, v1))
        return self._edge_normals[key]


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-20 else np.array([0.0, 0.0, 1.0])


def closest_points_bulk(mesh: TriangleMesh, points: np.ndarray):
    """Closest surface points for many queries: (sq_dist, point, face, bary)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    a, b, c = mesh.tri_corners
    t = len(mesh.faces)

    if t > _BULK_BRUTE_FACES:
        d2 = np.empty(n)
        pts = np.empty((n, 3))
        face = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3))
        bvh = mesh.bvh
        for i, p in enumerate(points):
            d2[i], pts[i], face[i], bary[i] = bvh.query(p)
        return d2, pts, face, bary

    rows = max(1, _CHUNK_PAIRS // t)
    d2 = np.empty(n)
    pts = np.empty((n, 3))
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    for s in range(0, n, rows):
        chunk = points[s:s + rows]
        m = len(chunk)
        # (m, t, 3) closest point of every query against every triangle
        cp, cb = closest_point_on_triangles(
            np.repeat(chunk, t, axis=0),
            np.tile(a, (m, 1)),
            np.tile(b, (m, 1)),
            np.tile(c, (m, 1)),
        )
        cp = cp.reshape(m, t, 3)
        cb = cb.reshape(m, t, 3)
        dd = np.sum((cp - chunk[:, None, :]) ** 2, axis=2)
        best = np.argmin(dd, axis=1)
        rows_idx = np.arange(m)
        d2[s:s + rows] = dd[rows_idx, best]
        pts[s:s + rows] = cp[rows_idx, best]
        face[s:s + rows] = best
        bary[s:s + rows] = cb[rows_idx, best]
    return d2, pts, face, bary


def winding_numbers(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Generalized winding number of each query point (~1 inside, ~0 outside)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a, b, c = mesh.tri_corners
    t = len(mesh.faces)
    out = np.empty(len(points))
    rows = max(1, _CHUNK_PAIRS // t)
    for s in range(0, len(points), rows):
        p = points[s:s + rows]
        va = a[None, :, :] - p[:, None, :]
        vb = b[None, :, :] - p[:, None, :]
        vc = c[None, :, :] - p[:, None, :]
        la = np.linalg.norm(va, axis=2)
        lb = np.linalg.norm(vb, axis=2)
        lc = np.linalg.norm(vc, axis=2)
        num = np.einsum("ptj,ptj->pt", np.cross(va, vb), vc)
        den = (
            la * lb * lc
            + np.einsum("ptj,ptj->pt", va, vb) * lc
            + np.einsum("ptj,ptj->pt", vb, vc) * la
            + np.einsum("ptj,ptj->pt", vc, va) * lb
        )
        out[s:s + rows] = np.arctan2(num, den).sum(axis=1) / (2.0 * np.pi)
    return out


def mesh_signed_distance(mesh: TriangleMesh, points) -> np.ndarray:
    """Signed distances: negative inside, positive outside, magnitude exact."""
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d2, _, _, _ = closest_points_bulk(mesh, pts)
    d = np.sqrt(d2)
    inside = winding_numbers(mesh, pts) > 0.5
    d[inside] *= -1.0
    return d[0] if single else d


def nearest_surface_point(mesh: TriangleMesh, p) -> NearestPoint:
    """Closest surface point and its outward (pseudo-)normal.

    Face interiors use the face normal; edge and vertex hits use
    angle-weighted pseudo-normals so the direction stays outward.
    """
    p = np.asarray(p, dtype=np.float64)
    _, point, face, bary = mesh.bvh.query(p)
    zero = bary <= 1e-9
    n_zero = int(zero.sum())
    f = mesh.faces[face]
    if n_zero == 0:
        normal = mesh.face_normals[face]
    elif n_zero == 1:
        live = np.flatnonzero(~zero)
        normal = mesh.edge_normal(int(f[live[0]]), int(f[live[1]]))
    else:
        v = int(f[np.argmax(bary)])
        normal = mesh.vertex_normals[v]
    return NearestPoint(point, normal, int(face), bary)


def sample_surface_points(mesh: TriangleMesh, n: int, seed: int, return_faces: bool = False):
    """Area-uniform surface samples with per-point face normals."""
    from .pointcloud import PointCloud

    if n < 1:
        raise ValueError("need n >= 1 samples")
    rng = np.random.default_rng(seed)
    probs = mesh.face_areas / mesh.face_areas.sum()
    fidx = rng.choice(len(mesh.faces), size=n, p=probs)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s1 = np.sqrt(r1)
    a, b, c = mesh.tri_corners
    pts = (
        (1.0 - s1)[:, None] * a[fidx]
        + (s1 * (1.0 - r2))[:, None] * b[fidx]
        + (s1 * r2)[:, None] * c[fidx]
    )
    cloud = PointCloud(pts, mesh.face_normals[fidx])
    if return_faces:
        return cloud, fidx
    return cloud
