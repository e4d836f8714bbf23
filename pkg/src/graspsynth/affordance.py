"""Affordance-annotated objects, rescaling, and object axis extraction.

An object is a triangle mesh plus a deterministically sampled surface
cloud on which two index sets mark the functional part (where the tool
action happens) and the grasping part (where the hand should hold).
Objects carry a scale defined as the maximum extent of the oriented
bounding box of the surface cloud; rescaling is uniform about the
surface centroid.

Annotation file schema:

    {
      "category": str,
      "seed": int,
      "n_points": int?,            # default 2048
      "native_scale": float,       # m, OBB max extent after load
      "functional_indices": [int, ...],
      "grasping_indices": [int, ...],
      "axes": {"gf": [x,y,z], "fa": [x,y,z]}?   # manual override
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    PointCloud,
    TriangleMesh,
    load_mesh,
    oriented_bounding_box,
    sample_surface_points,
)

DEFAULT_SURFACE_POINTS = 2048

_DATA_DIR = Path(__file__).parent / "data" / "objects"


class ObjectLoadError(ValueError):
    """An object annotation failed validation."""


class DegenerateGeometryError(ValueError):
    """Part geometry admits no well-defined axes."""


@dataclass(frozen=True)
class ObjectAxes:
    """Object GF (grasping part toward functional part) and FA (press) axes."""

    gf: np.ndarray
    fa: np.ndarray

    def __post_init__(self):
        gf = np.asarray(self.gf, dtype=np.float64)
        fa = np.asarray(self.fa, dtype=np.float64)
        if gf.shape != (3,) or fa.shape != (3,):
            raise ValueError("axes must be 3-vectors")
        if abs(np.linalg.norm(gf) - 1) > 1e-6 or abs(np.linalg.norm(fa) - 1) > 1e-6:
            raise ValueError("axes must be unit length")
        if abs(gf @ fa) > 1e-6:
            raise ValueError("gf and fa must be orthogonal within 1e-6")
        object.__setattr__(self, "gf", gf)
        object.__setattr__(self, "fa", fa)


@dataclass(frozen=True)
class CategoryScaleRange:
    """Scale interval swept per object category, endpoints in meters."""

    category: str
    s_low: float
    s_high: float
    n_scales: int = 15

    def __post_init__(self):
        if not (0 < self.s_low < self.s_high):
            raise ValueError(f"need 0 < s_low < s_high, got ({self.s_low}, {self.s_high})")
        if self.n_scales < 1:
            raise ValueError("n_scales must be at least 1")


@dataclass(frozen=True)
class AffordanceObject:
    mesh: TriangleMesh
    surface: PointCloud  # sampled with normals
    functional_part: np.ndarray  # indices into surface
    grasping_part: np.ndarray
    category: str
    scale: float  # OBB max extent of surface (m)
    axis_override: ObjectAxes | None = None

    def functional_points(self) -> np.ndarray:
        return self.surface.points[self.functional_part]

    def grasping_points(self) -> np.ndarray:
        return self.surface.points[self.grasping_part]


def bundled_object_paths(name: str) -> tuple:
    """(mesh path, annotation path) of an object fixture shipped with the package."""
    mesh = _DATA_DIR / f"{name}.obj"
    note = _DATA_DIR / f"{name}.json"
    if not mesh.is_file() or not note.is_file():
        have = sorted(p.stem for p in _DATA_DIR.glob("*.json"))
        raise FileNotFoundError(f"no bundled object '{name}'; available: {have}")
    return mesh, note


def _check_indices(raw, name: str, n: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise ObjectLoadError(f"{name}: part must be a non-empty index list")
    for k, v in enumerate(arr):
        if v < 0 or v >= n:
            raise ObjectLoadError(
                f"{name}[{k}] = {int(v)}: out of range for {n} surface points"
            )
    return arr


def indices_from_labels(labels) -> tuple:
    """Convert painted per-point labels to canonical index sets.

    Labels are per-point strings from {none, functional, grasping, both};
    returns (functional_indices, grasping_indices).
    """
    allowed = {"none", "functional", "grasping", "both"}
    functional, grasping = [], []
    for i, lab in enumerate(labels):
        if lab not in allowed:
            raise ObjectLoadError(f"labels[{i}] = '{lab}': expected one of {sorted(allowed)}")
        if lab in ("functional", "both"):
            functional.append(i)
        if lab in ("grasping", "both"):
            grasping.append(i)
    return np.asarray(functional, dtype=np.int64), np.asarray(grasping, dtype=np.int64)


def load_object(mesh_path, annotation_path) -> AffordanceObject:
    """Load a mesh and its annotation, sample the surface, rescale to native size."""
    mesh = load_mesh(mesh_path)
    note_path = Path(annotation_path)
    try:
        note = json.loads(note_path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ObjectLoadError(f"{note_path}: cannot parse annotation ({err})") from err
    for key in ("category", "seed", "native_scale", "functional_indices", "grasping_indices"):
        if key not in note:
            raise ObjectLoadError(f"{note_path}: missing required field '{key}'")
    n_points = int(note.get("n_points", DEFAULT_SURFACE_POINTS))
    if n_points < 1:
        raise ObjectLoadError(f"{note_path}: n_points must be positive")
    native = float(note["native_scale"])
    if native <= 0:
        raise ObjectLoadError(f"{note_path}: native_scale must be positive")
    surface = sample_surface_points(mesh, n_points, seed=int(note["seed"]))
    functional = _check_indices(note["functional_indices"], "functional_indices", n_points)
    grasping = _check_indices(note["grasping_indices"], "grasping_indices", n_points)
    override = None
    if "axes" in note:
        spec = note["axes"]
        gf = np.asarray(spec.get("gf"), dtype=np.float64)
        fa = np.asarray(spec.get("fa"), dtype=np.float64)
        if gf.shape != (3,) or fa.shape != (3,):
            raise ObjectLoadError(f"{note_path}: axes override needs 3-vector gf and fa")
        norm = np.linalg.norm(gf)
        if norm < 1e-9:
            raise ObjectLoadError(f"{note_path}: axes.gf is degenerate")
        gf = gf / norm
        fa = fa - (fa @ gf) * gf
        norm = np.linalg.norm(fa)
        if norm < 1e-9:
            raise ObjectLoadError(f"{note_path}: axes.fa is parallel to gf")
        override = ObjectAxes(gf, fa / norm)
    obj = AffordanceObject(
        mesh=mesh,
        surface=surface,
        functional_part=functional,
        grasping_part=grasping,
        category=str(note["category"]),
        scale=float(oriented_bounding_box(surface.points).max_extent),
        axis_override=override,
    )
    return rescale_object(obj, native)


def rescale_object(obj: AffordanceObject, target_scale: float) -> AffordanceObject:
    """Uniformly rescale about the surface centroid to the target OBB max extent."""
    if target_scale <= 0:
        raise ValueError(f"target_scale must be positive, got {target_scale}")
    factor = target_scale / obj.scale
    center = obj.surface.points.mean(axis=0)
    points = center + factor * (obj.surface.points - center)
    vertices = center + factor * (obj.mesh.vertices - center)
    return dataclasses.replace(
        obj,
        mesh=TriangleMesh(vertices, obj.mesh.faces),
        surface=PointCloud(points, obj.surface.normals),
        scale=float(target_scale),
    )


def sample_scales(scale_range: CategoryScaleRange) -> np.ndarray:
    """Linearly spaced scales, inclusive of both endpoints."""
    if scale_range.n_scales == 1:
        return np.array([scale_range.s_low])
    return np.linspace(scale_range.s_low, scale_range.s_high, scale_range.n_scales)


def load_scale_ranges(path=None) -> dict:
    """category -> CategoryScaleRange from a {category: [s_low, s_high]} file.

    Defaults to the table shipped with the package.
    """
    if path is None:
        path = Path(__file__).parent / "data" / "scale_ranges.json"
    try:
        table = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ObjectLoadError(f"{path}: cannot parse scale ranges ({err})") from err
    if not isinstance(table, dict):
        raise ObjectLoadError(f"{path}: expected a category -> [s_low, s_high] map")
    out = {}
    for category, pair in table.items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ObjectLoadError(f"{path}: '{category}' needs [s_low, s_high]")
        out[category] = CategoryScaleRange(category, float(pair[0]), float(pair[1]))
    return out


def object_axes(obj: AffordanceObject) -> ObjectAxes:
    """GF from part centroids, FA from the mean functional normal pressed inward.

    A manual override stored in the annotation wins; otherwise degenerate
    geometry raises with a hint to add one.
    """
    if obj.axis_override is not None:
        return obj.axis_override
    cf = obj.functional_points().mean(axis=0)
    cg = obj.grasping_points().mean(axis=0)
    gf = cf - cg
    norm = np.linalg.norm(gf)
    if norm < 1e-6:
        raise DegenerateGeometryError(
            "part centroids coincide; add an 'axes' override to the annotation file"
        )
    gf = gf / norm
    if obj.surface.normals is None:
        raise DegenerateGeometryError("surface cloud has no normals")
    fa = -obj.surface.normals[obj.functional_part].mean(axis=0)
    fa = fa - (fa @ gf) * gf
    norm = np.linalg.norm(fa)
    if norm < 1e-8:
        raise DegenerateGeometryError(
            "mean functional normal is parallel to GF; "
            "add an 'axes' override to the annotation file"
        )
    return ObjectAxes(gf, fa / norm)
