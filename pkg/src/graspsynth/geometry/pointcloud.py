"""Point clouds and the symmetric squared chamfer distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# brute force below this pair count; KD-tree above
_BRUTE_PAIR_LIMIT = 262144


@dataclass
class PointCloud:
    """Points in meters, optional per-point unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("points must be an (N, 3) array")
        if not np.isfinite(self.points).all():
            raise ValueError("points contain non-finite values")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points shape")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must be unit length within 1e-6")

    def __len__(self):
        return self.points.shape[0]


def _as_points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (N, 3) point array")
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")
    return pts


def nearest_neighbor(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of p, squared distance to and index of its nearest row in q."""
    p = _as_points(p)
    q = _as_points(q)
    if p.shape[0] * q.shape[0] <= _BRUTE_PAIR_LIMIT:
        d2 = np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(len(p)), idx], idx
    dist, idx = cKDTree(q).query(p)
    return dist * dist, idx


def chamfer_distance(p, q) -> float:
    """Symmetric squared chamfer distance (m^2).

    (1/N_P) sum_p min_q ||p-q||^2 + (1/N_Q) sum_q min_p ||q-p||^2.
    No square root is taken; values scale with the square of object size.
    """
    pa = _as_points(p)
    qa = _as_points(q)
    d2_pq, _ = nearest_neighbor(pa, qa)
    d2_qp, _ = nearest_neighbor(qa, pa)
    return float(d2_pq.mean() + d2_qp.mean())
