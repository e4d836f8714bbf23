"""Median-split bounding-volume hierarchy for closest-point mesh queries.

Build is deterministic: split axis is the widest centroid extent, split
point the median under a stable argsort, leaves hold up to LEAF_SIZE
triangles. Queries walk an explicit stack, pruning nodes whose boxes lie
farther than the current best squared distance; leaf triangles are tested
with a vectorized closest-point-on-triangle routine.
"""

from __future__ import annotations

import numpy as np

LEAF_SIZE = 8


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point to p on each triangle (a, b, c); returns (points, bary).

    Vectorized region classification (Ericson, Real-Time Collision
    Detection 5.1.5). p is (3,) or (K, 3) paired with (K, 3) vertices.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    k = a.shape[0]
    out = np.empty_like(a)
    bary = np.empty((k, 3))
    done = np.zeros(k, dtype=bool)

    def assign(mask, pts, bar):
        fresh = mask & ~done
        if np.any(fresh):
            out[fresh] = pts[fresh] if pts.shape == out.shape else pts
            bary[fresh] = bar[fresh] if bar.shape == bary.shape else bar
            done[fresh] = True

    assign((d1 <= 0) & (d2 <= 0), a, np.broadcast_to([1.0, 0.0, 0.0], (k, 3)))
    assign((d3 >= 0) & (d4 <= d3), b, np.broadcast_to([0.0, 1.0, 0.0], (k, 3)))
    assign((d6 >= 0) & (d5 <= d6), c, np.broadcast_to([0.0, 0.0, 1.0], (k, 3)))

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        pts_ab = a + v_ab[:, None] * ab
        bar_ab = np.stack([1 - v_ab, v_ab, np.zeros(k)], axis=1)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), pts_ab, bar_ab)

        w_ac = d2 / (d2 - d6)
        pts_ac = a + w_ac[:, None] * ac
        bar_ac = np.stack([1 - w_ac, np.zeros(k), w_ac], axis=1)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), pts_ac, bar_ac)

        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        pts_bc = b + w_bc[:, None] * (c - b)
        bar_bc = np.stack([np.zeros(k), 1 - w_bc, w_bc], axis=1)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), pts_bc, bar_bc)

        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        pts_in = a + v[:, None] * ab + w[:, None] * ac
        bar_in = np.stack([1 - v - w, v, w], axis=1)
        assign(np.ones(k, dtype=bool), pts_in, bar_in)

    return out, bary


class BVH:
    def __init__(self, tri_a: np.ndarray, tri_b: np.ndarray, tri_c: np.ndarray):
        self.a, self.b, self.c = tri_a, tri_b, tri_c
        n = tri_a.shape[0]
        lo = np.minimum(np.minimum(tri_a, tri_b), tri_c)
        hi = np.maximum(np.maximum(tri_a, tri_b), tri_c)
        centroids = (tri_a + tri_b + tri_c) / 3.0

        self.node_lo, self.node_hi = [], []
        self.node_left, self.node_right = [], []
        self.node_start, self.node_count = [], []
        self.order = np.arange(n)

        # stack of (triangle range) to split; children appended after parent
        stack = [(0, n, self._push())]
        while stack:
            start, end, node = stack.pop()
            ids = self.order[start:end]
            self.node_lo[node] = lo[ids].min(axis=0)
            self.node_hi[node] = hi[ids].max(axis=0)
            if end - start <= LEAF_SIZE:
                self.node_start[node] = start
                self.node_count[node] = end - start
                continue
            cen = centroids[ids]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            perm = np.argsort(cen[:, axis], kind="stable")
            self.order[start:end] = ids[perm]
            mid = start + (end - start) // 2
            left = self._push()
            right = self._push()
            self.node_left[node] = left
            self.node_right[node] = right
            stack.append((start, mid, left))
            stack.append((mid, end, right))

        self.node_lo = np.array(self.node_lo)
        self.node_hi = np.array(self.node_hi)
        self.node_left = np.array(self.node_left)
        self.node_right = np.array(self.node_right)
        self.node_start = np.array(self.node_start)
        self.node_count = np.array(self.node_count)

    def _push(self) -> int:
        self.node_lo.append(None)
        self.node_hi.append(None)
        self.node_left.append(-1)
        self.node_right.append(-1)
        self.node_start.append(-1)
        self.node_count.append(0)
        return len(self.node_lo) - 1

    def _box_sq_dist(self, node: int, p: np.ndarray) -> float:
        d = np.maximum(np.maximum(self.node_lo[node] - p, 0.0), p - self.node_hi[node])
        return float(d @ d)

    def query(self, p: np.ndarray):
        """Closest surface point to p: (sq_dist, point, triangle_id, bary)."""
        best_d2 = np.inf
        best = (None, -1, None)
        stack = [(self._box_sq_dist(0, p), 0)]
        while stack:
            d2, node = stack.pop()
            if d2 >= best_d2:
                continue
            if self.node_count[node] > 0:
                s = self.node_start[node]
                ids = self.order[s:s + self.node_count[node]]
                pts, bary = closest_point_on_triangles(p, self.a[ids], self.b[ids], self.c[ids])
                dd = np.sum((pts - p) ** 2, axis=1)
                i = int(np.argmin(dd))
                if dd[i] < best_d2:
                    best_d2 = float(dd[i])
                    best = (pts[i], int(ids[i]), bary[i])
            else:
                l, r = self.node_left[node], self.node_right[node]
                dl, dr = self._box_sq_dist(l, p), self._box_sq_dist(r, p)
                # visit nearer child first: push farther first
                if dl < dr:
                    stack.append((dr, r))
                    stack.append((dl, l))
                else:
                    stack.append((dl, l))
                    stack.append((dr, r))
        return best_d2, best[0], best[1], best[2]
