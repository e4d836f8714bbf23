"""Geometry kernels: point clouds, meshes, primitives, SDFs, sampling."""

from .pointcloud import PointCloud, chamfer_distance, nearest_neighbor
from .primitives import ConvexPrimitive, primitive_signed_distance, tessellate_primitive
from .obb import OrientedBoundingBox, oriented_bounding_box
from .mesh import (
    TriangleMesh,
    NearestPoint,
    mesh_signed_distance,
    nearest_surface_point,
    sample_surface_points,
    winding_numbers,
)
from .io import load_mesh, save_ply

__all__ = [
    "PointCloud",
    "chamfer_distance",
    "nearest_neighbor",
    "ConvexPrimitive",
    "primitive_signed_distance",
    "tessellate_primitive",
    "OrientedBoundingBox",
    "oriented_bounding_box",
    "TriangleMesh",
    "NearestPoint",
    "mesh_signed_distance",
    "nearest_surface_point",
    "sample_surface_points",
    "winding_numbers",
    "load_mesh",
    "save_ply",
]
