"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation matrix from a random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rel_err(a, b, floor=1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def ray_parity_inside(vertices, faces, point, rng) -> bool:
    """Crossing-parity inside test; resamples the ray if it grazes an edge.

    Independent of the package SDF path: plain Moller-Trumbore against
    every triangle.
    """
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    for _ in range(32):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        h = np.cross(d, e2)
        a = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(a) > 1e-12
        f = np.zeros_like(a)
        f[ok] = 1.0 / a[ok]
        s = point - v0
        u = f * np.einsum("ij,ij->i", s, h)
        q = np.cross(s, e1)
        v = f * np.einsum("j,ij->i", d, q)
        t = f * np.einsum("ij,ij->i", e2, q)
        hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        # grazing: intersection too close to an edge or the ray origin plane
        grazing = hits & (
            (u < 1e-9) | (v < 1e-9) | (u + v > 1 - 1e-9) | (np.abs(t) < 1e-9)
        )
        if grazing.any():
            continue
        return bool(hits.sum() % 2 == 1)
    raise RuntimeError("could not find a non-grazing ray")
