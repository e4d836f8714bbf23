"""PCA-based oriented bounding boxes.

Covariance PCA rather than minimum-volume: only the maximum extent feeds
the scale logic, and PCA is deterministic and cheap. Axis signs are fixed
(largest-magnitude component positive) so repeated builds agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OrientedBoundingBox:
    center: np.ndarray
    axes: np.ndarray  # columns are the three orthonormal axes
    half_extents: np.ndarray

    @property
    def max_extent(self) -> float:
        """Full extent (not half) along the widest axis, in meters."""
        return float(2.0 * self.half_extents.max())

    def contains(self, points, slack: float = 1e-6) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        local = (pts - self.center) @ self.axes
        return bool(np.all(np.abs(local) <= self.half_extents + slack))


def oriented_bounding_box(points) -> OrientedBoundingBox:
    pts = np.asarray(points.points if hasattr(points, "points") else points, dtype=np.float64)
    pts = np.atleast_2d(pts)
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")

    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / max(len(pts), 1)
    _, vecs = np.linalg.eigh(cov)
    # deterministic sign: largest-|component| of each axis made positive
    for k in range(3):
        j = int(np.argmax(np.abs(vecs[:, k])))
        if vecs[j, k] < 0:
            vecs[:, k] = -vecs[:, k]

    local = centered @ vecs
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    center = mean + vecs @ ((lo + hi) / 2.0)
    return OrientedBoundingBox(center, vecs, (hi - lo) / 2.0)
