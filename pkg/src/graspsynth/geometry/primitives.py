"""Analytic convex primitives: sphere, capsule, box.

Primitives stand in for hand part meshes so penetration losses get exact,
differentiable signed distances. The capsule segment runs along local z
from -half_length to +half_length; the box is axis-aligned in its local
frame with the given half extents; poses place the local frame in the
parent (link) frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import transforms
from .mesh import TriangleMesh


@dataclass
class ConvexPrimitive:
    kind: str  # sphere | capsule | box
    pose: np.ndarray  # 4x4, local -> parent frame
    radius: float | None = None
    half_length: float | None = None
    half_extents: np.ndarray | None = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError("pose must be a 4x4 rigid transform")
        if self.kind == "sphere":
            if self.radius is None or self.radius <= 0:
                raise ValueError("sphere needs radius > 0")
        elif self.kind == "capsule":
            if self.radius is None or self.radius <= 0:
                raise ValueError("capsule needs radius > 0")
            if self.half_length is None or self.half_length <= 0:
                raise ValueError("capsule needs half_length > 0")
        elif self.kind == "box":
            if self.half_extents is None:
                raise ValueError("box needs half_extents")
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
            if self.half_extents.shape != (3,) or np.any(self.half_extents <= 0):
                raise ValueError("box half_extents must be 3 positive values")
        else:
            raise ValueError(f"unknown primitive kind '{self.kind}'")

    @classmethod
    def sphere(cls, center, radius):
        return cls("sphere", transforms.make_transform(np.eye(3), center), radius=radius)

    @classmethod
    def capsule(cls, p0, p1, radius):
        """Capsule from segment endpoints in the parent frame."""
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        d = p1 - p0
        length = np.linalg.norm(d)
        if length < 1e-12:
            raise ValueError("capsule endpoints coincide")
        rot = transforms.rotation_between(np.array([0.0, 0.0, 1.0]), d / length)
        return cls(
            "capsule",
            transforms.make_transform(rot, (p0 + p1) / 2.0),
            radius=radius,
            half_length=length / 2.0,
        )

    @classmethod
    def box(cls, center, half_extents, rotation=None):
        rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        return cls("box", transforms.make_transform(rot, center), half_extents=half_extents)


def _sphere_sdf(local: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(local, axis=1) - radius


def _capsule_sdf(local: np.ndarray, radius: float, half_length: float) -> np.ndarray:
    z = np.clip(local[:, 2], -half_length, half_length)
    d = local.copy()
    d[:, 2] -= z
    return np.linalg.norm(d, axis=1) - radius


def _box_sdf(local: np.ndarray, half_extents: np.ndarray) -> np.ndarray:
    q = np.abs(local) - half_extents
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def primitive_signed_distance(prim: ConvexPrimitive, points) -> np.ndarray:
    """Signed distance of points (in the primitive's parent frame) to the surface."""
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    local = transforms.transform_points(transforms.transform_inverse(prim.pose), pts)
    if prim.kind == "sphere":
        out = _sphere_sdf(local, prim.radius)
    elif prim.kind == "capsule":
        out = _capsule_sdf(local, prim.radius, prim.half_length)
    else:
        out = _box_sdf(local, prim.half_extents)
    return out[0] if single else out


def _uv_sphere(radius: float, n_lat: int, n_lon: int):
    verts = [np.array([0.0, 0.0, radius]), np.array([0.0, 0.0, -radius])]
    rings = []
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        ring = []
        for j in range(n_lon):
            th = 2 * np.pi * j / n_lon
            ring.append(len(verts))
            verts.append(radius * np.array([
                np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)
            ]))
        rings.append(ring)
    faces = []
    for j in range(n_lon):
        faces.append([0, rings[0][j], rings[0][(j + 1) % n_lon]])
        faces.append([1, rings[-1][(j + 1) % n_lon], rings[-1][j]])
    for i in range(len(rings) - 1):
        for j in range(n_lon):
            a, b = rings[i][j], rings[i][(j + 1) % n_lon]
            c, d = rings[i + 1][j], rings[i + 1][(j + 1) % n_lon]
            faces.append([a, c, d])
            faces.append([a, d, b])
    return np.array(verts), np.array(faces)


def _capsule_mesh(radius: float, half_length: float, n_lat: int, n_lon: int):
    # stretch a uv-sphere: upper hemisphere to +half_length, lower to -half_length
    verts, faces = _uv_sphere(radius, n_lat, n_lon)
    shifted = verts.copy()
    shifted[:, 2] += np.where(verts[:, 2] >= 0.0, half_length, -half_length)
    return shifted, faces


def _box_mesh(half_extents: np.ndarray):
    h = half_extents
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64) * h
    quads = [
        [0, 3, 2, 1],  # -z
        [4, 5, 6, 7],  # +z
        [0, 1, 5, 4],  # -y
        [2, 3, 7, 6],  # +y
        [1, 2, 6, 5],  # +x
        [3, 0, 4, 7],  # -x
    ]
    faces = []
    for q in quads:
        faces.append([q[0], q[1], q[2]])
        faces.append([q[0], q[2], q[3]])
    return corners, np.array(faces)


def tessellate_primitive(prim: ConvexPrimitive, resolution: int = 12) -> TriangleMesh:
    """Triangle mesh of the primitive surface, in the parent frame."""
    if prim.kind == "sphere":
        verts, faces = _uv_sphere(prim.radius, resolution, 2 * resolution)
    elif prim.kind == "capsule":
        verts, faces = _capsule_mesh(prim.radius, prim.half_length, resolution, 2 * resolution)
    else:
        verts, faces = _box_mesh(prim.half_extents)
    verts = transforms.transform_points(prim.pose, verts)
    return TriangleMesh(verts, faces)
