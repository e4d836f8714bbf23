"""Grasp synthesis: axis-aligned initialization and five-term loss descent.

The objective is a weighted sum of five terms. L_F pulls the functional
fingertip anchors onto the object's functional part and L_G pulls the
grasping anchors onto the grasping part (both squared chamfer distances);
L_FC is the force-closure residual ||Gc|| of the detected contacts; L_IP
penalizes object surface points penetrating the hand's primitives; L_SP
penalizes the hand's parts penetrating each other.

Optimization runs over a 6+J tangent parameterization: root translation,
an axis-angle rotation increment folded into the root quaternion after
every step, and the joint angles (projected to limits). Gradients come
from the reverse-mode tape with correspondences frozen per evaluation:
chamfer nearest neighbors, contact points, and penetration prune sets are
recomputed from the current configuration and held fixed while the tape
differentiates through kinematics and signed distances. Away from clamp
boundaries and nearest-neighbor ties this equals the exact gradient;
near_loss_kink() reports configurations where it does not.
"""

from __future__ import annotations

import os
import weakref
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .affordance import AffordanceObject, object_axes
from .geometry.mesh import mesh_signed_distance
from .geometry.pointcloud import nearest_neighbor
from .geometry.primitives import primitive_signed_distance
from .hand import (
    GraspConfiguration,
    HandModel,
    forward_kinematics,
    forward_kinematics_tape,
    hand_axes,
    hand_surface_points,
    project_to_limits,
    transform_points_tape,
)

DEFAULT_CONTACT_THRESHOLD = 0.005  # m; anchors closer than this become contacts
EMPTY_CONTACT_PENALTY = 1.0  # constant L_FC when no contact exists; no gradient

_SKEW_BASIS = np.array([
    [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
    [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
    [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
])
_ONES_COL = np.ones((3, 1))
_EZ_COL = np.array([[0.0], [0.0], [1.0]])
_EZ_ROW = np.array([[0.0, 0.0, 1.0]])


class SynthesisError(RuntimeError):
    """Synthesis could not produce a configuration."""


class InitFailure(SynthesisError):
    """Axis-aligned initialization found no hand-object contact."""


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights for the five loss terms."""

    lambda_f: float = 100.0
    lambda_g: float = 10.0
    lambda_fc: float = 1.0
    lambda_ip: float = 500.0
    lambda_sp: float = 500.0

    def __post_init__(self):
        for name in ("lambda_f", "lambda_g", "lambda_fc", "lambda_ip", "lambda_sp"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class ContactSet:
    """Contact points x_i with unit friction cone axes c_i."""

    points: np.ndarray  # (n, 3)
    cone_axes: np.ndarray  # (n, 3), unit

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        axes = np.asarray(self.cone_axes, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] != axes.shape[0]:
            raise ValueError("points and cone_axes must have equal lengths")
        if axes.shape[0] and np.any(np.abs(np.linalg.norm(axes, axis=1) - 1) > 1e-6):
            raise ValueError("cone axes must be unit length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cone_axes", axes)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class OptimizerSettings:
    """First-order descent and initialization knobs."""

    step_size: float = 0.005
    max_steps: int = 200
    adam_betas: tuple = (0.9, 0.999)
    contact_threshold: float = DEFAULT_CONTACT_THRESHOLD
    init_flex: float = 0.2  # rad applied to flexion joints before alignment
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.contact_threshold <= 0:
            raise ValueError("contact_threshold must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


class LossBreakdown(NamedTuple):
    functional: float
    grasping: float
    force_closure: float
    interpenetration: float
    self_penetration: float
    total: float


@dataclass(frozen=True)
class SynthesisResult:
    """One batch run: the drawn variation, and the outcome or the failure."""

    run_index: int
    functional_finger: str
    thumb_variant: int | None
    fa_sign: int
    azimuth: float
    config: GraspConfiguration | None
    breakdown: LossBreakdown | None
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.config is not None


# ---------------------------------------------------------------------------
# shared geometry helpers


def _group_by_link(anchors) -> list:
    """[(link index, (k, 3) link-frame points)], links in ascending order."""
    by: dict = {}
    for a in anchors:
        by.setdefault(a.link, []).append(a.point)
    return [(l, np.asarray(pts, dtype=np.float64)) for l, pts in sorted(by.items())]


def _functional_groups(hand: HandModel, finger: str) -> list:
    if finger not in hand.functional_anchors:
        raise ValueError(
            f"unknown functional finger '{finger}'; hand has {sorted(hand.functional_anchors)}"
        )
    return _group_by_link(hand.functional_anchors[finger])


def _world_anchor_points(groups, poses) -> np.ndarray:
    return np.vstack([tf.transform_points(poses[l], pts) for l, pts in groups])


def _all_contact_anchors(hand: HandModel) -> list:
    """Functional anchors of every finger plus the grasping set, grouped by link."""
    anchors = []
    for finger in hand.fingers:
        anchors.extend(hand.functional_anchors[finger])
    anchors.extend(hand.grasping_anchors)
    return _group_by_link(anchors)


def _link_bound_radii(hand: HandModel) -> np.ndarray:
    """Conservative per-link radius enclosing its primitives, about the link origin."""
    radii = np.zeros(len(hand.links))
    for i, link in enumerate(hand.links):
        r = 0.0
        for prim in link.primitives:
            c = float(np.linalg.norm(prim.pose[:3, 3]))
            if prim.kind == "sphere":
                r = max(r, c + prim.radius)
            elif prim.kind == "capsule":
                r = max(r, c + prim.half_length + prim.radius)
            else:
                r = max(r, c + float(np.linalg.norm(prim.half_extents)))
        radii[i] = r
    return radii


def _link_cloud_radii(hand: HandModel) -> np.ndarray:
    return np.array([
        float(np.linalg.norm(link.surface_points.points, axis=1).max())
        for link in hand.links
    ])


class _HandStatics(NamedTuple):
    radii: np.ndarray  # per-link ball about the link origin enclosing its prims
    cloud_r: np.ndarray  # per-link ball about the link origin enclosing its cloud
    parts: dict
    prim_centers: np.ndarray  # (P, 3) primitive ball centers, link frames
    prim_radii: np.ndarray  # (P,)
    prim_link: np.ndarray  # (P,) owning link index
    prim_starts: np.ndarray  # (L,) first prim row per link, for reduceat
    cloud_centers: np.ndarray  # (L, 3) cloud centroids, link frames
    cloud_cr: np.ndarray  # (L,) cloud radius about its centroid


_HAND_CACHE: dict = {}


def _hand_statics(hand: HandModel) -> _HandStatics:
    """Configuration-independent prune structures, cached per hand instance."""
    key = id(hand)
    got = _HAND_CACHE.get(key)
    if got is not None:
        return got
    centers, radii_p, owner, starts = [], [], [], []
    for i, link in enumerate(hand.links):
        starts.append(len(centers))
        for prim in link.primitives:
            centers.append(prim.pose[:3, 3])
            if prim.kind == "sphere":
                radii_p.append(prim.radius)
            elif prim.kind == "capsule":
                radii_p.append(prim.half_length + prim.radius)
            else:
                radii_p.append(float(np.linalg.norm(prim.half_extents)))
            owner.append(i)
    cloud_centers = np.array([l.surface_points.points.mean(axis=0) for l in hand.links])
    cloud_cr = np.array([
        float(np.linalg.norm(l.surface_points.points - c, axis=1).max())
        for l, c in zip(hand.links, cloud_centers)
    ])
    got = _HandStatics(
        _link_bound_radii(hand), _link_cloud_radii(hand), hand.part_links(),
        np.asarray(centers, dtype=np.float64), np.asarray(radii_p, dtype=np.float64),
        np.asarray(owner, dtype=int), np.asarray(starts, dtype=int),
        cloud_centers, cloud_cr,
    )
    _HAND_CACHE[key] = got
    weakref.finalize(hand, _HAND_CACHE.pop, key, None)
    return got


def _pair_sep_matrix(statics: _HandStatics, poses) -> np.ndarray:
    """(L, L) bool: every primitive ball of link i clears the cloud ball of link j."""
    rots = np.array([pose[:3, :3] for pose in poses])
    ts = np.array([pose[:3, 3] for pose in poses])
    pc = np.einsum("pij,pj->pi", rots[statics.prim_link], statics.prim_centers)
    pc += ts[statics.prim_link]
    cc = np.einsum("lij,lj->li", rots, statics.cloud_centers) + ts
    d = np.linalg.norm(pc[:, None, :] - cc[None, :, :], axis=2)
    sep = d > statics.prim_radii[:, None] + statics.cloud_cr[None, :]
    return np.logical_and.reduceat(sep, statics.prim_starts, axis=0)


def _part_penetration(hand, poses, points, links, radii, near_all=None) -> np.ndarray:
    """Per-point penetration depth into one part: max over the part's primitives.

    max(-min_sdf, 0) over primitives equals the max of per-primitive clamped
    depths, so pruned (provably separated) primitives drop out exactly.
    near_all optionally carries precomputed (n_points, n_links) ball tests.
    """
    pen = np.zeros(points.shape[0])
    for l in links:
        pose = poses[l]
        if near_all is None:
            near = np.linalg.norm(points - pose[:3, 3], axis=1) <= radii[l]
        else:
            near = near_all[:, l]
        if not near.any():
            continue
        local = tf.transform_points(tf.transform_inverse(pose), points[near])
        for prim in hand.links[l].primitives:
            depth = np.maximum(-primitive_signed_distance(prim, local), 0.0)
            pen[near] = np.maximum(pen[near], depth)
    return pen


def _near_matrix(points: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("plk,plk->pl", diff, diff) <= radii * radii


def _interpenetration_from_poses(hand, poses, points, st: _HandStatics,
                                 near_all=None) -> float:
    if near_all is None:
        centers = np.array([pose[:3, 3] for pose in poses])
        near_all = _near_matrix(points, centers, st.radii)
    total = 0.0
    for links in st.parts.values():
        total += _part_penetration(hand, poses, points, links, st.radii, near_all).sum()
    return float(total)


def _pairwise_part_penetrations(hand, poses, st: _HandStatics, sep=None):
    """Yield per-point depths of each part's cloud inside every other part."""
    if sep is None:
        sep = _pair_sep_matrix(st, poses)
    posed: dict = {}
    for pi, links_i in st.parts.items():
        for pj, links_j in st.parts.items():
            if pi == pj:
                continue
            if sep[np.ix_(links_i, links_j)].all():
                continue
            for lj in links_j:
                if lj not in posed:
                    posed[lj] = tf.transform_points(poses[lj], hand.links[lj].surface_points.points)
            pts_j = np.vstack([posed[lj] for lj in links_j])
            yield _part_penetration(hand, poses, pts_j, links_i, st.radii)


def _self_penetration_from_poses(hand, poses, st: _HandStatics, sep=None) -> float:
    total = 0.0
    for pen in _pairwise_part_penetrations(hand, poses, st, sep):
        total += pen.sum()
    return float(total)


def _chamfer_value(a: np.ndarray, b: np.ndarray) -> float:
    d_ab, _ = nearest_neighbor(a, b)
    d_ba, _ = nearest_neighbor(b, a)
    return float(d_ab.mean() + d_ba.mean())


# ---------------------------------------------------------------------------
# loss terms (plain evaluation)


def loss_functional(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
                    functional_finger: str = "index") -> float:
    """Chamfer distance between the finger's functional anchors and the functional part."""
    groups = _functional_groups(hand, functional_finger)
    target = obj.functional_points()
    if target.shape[0] == 0:
        raise ValueError("object functional part is empty")
    poses = forward_kinematics(hand, config)
    return _chamfer_value(_world_anchor_points(groups, poses), target)


def loss_grasping(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject) -> float:
    """Chamfer distance between the grasping anchors and the grasping part."""
    target = obj.grasping_points()
    if target.shape[0] == 0:
        raise ValueError("object grasping part is empty")
    poses = forward_kinematics(hand, config)
    groups = _group_by_link(hand.grasping_anchors)
    return _chamfer_value(_world_anchor_points(groups, poses), target)


def detect_contacts(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
                    threshold: float = DEFAULT_CONTACT_THRESHOLD) -> ContactSet:
    """Anchors within threshold of the surface cloud become contacts.

    Each near anchor contributes its nearest surface sample as the contact
    point and the sample's inward normal as the friction cone axis.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    poses = forward_kinematics(hand, config)
    return _contacts_from_poses(hand, poses, obj, threshold)


def loss_force_closure(contacts: ContactSet) -> float:
    """Euclidean norm of the net wrench (sum c_i, sum x_i x c_i).

    An empty contact set returns the constant EMPTY_CONTACT_PENALTY so the
    grasping term establishes contact before this term means anything.
    """
    if len(contacts) == 0:
        return EMPTY_CONTACT_PENALTY
    force = contacts.cone_axes.sum(axis=0)
    torque = np.cross(contacts.points, contacts.cone_axes).sum(axis=0)
    return float(np.linalg.norm(np.concatenate([force, torque])))


def loss_interpenetration(hand: HandModel, config: GraspConfiguration,
                          obj: AffordanceObject) -> float:
    """Total penetration depth of object surface points into the hand parts."""
    poses = forward_kinematics(hand, config)
    return _interpenetration_from_poses(hand, poses, obj.surface.points,
                                        _hand_statics(hand))


def loss_self_penetration(hand: HandModel, config: GraspConfiguration) -> float:
    """Penetration of every part's surface points into every other part."""
    poses = forward_kinematics(hand, config)
    return _self_penetration_from_poses(hand, poses, _hand_statics(hand))


def _contacts_from_poses(hand, poses, obj, threshold) -> ContactSet:
    if obj.surface.normals is None:
        raise ValueError("contact detection needs surface normals on the object cloud")
    anchors = _world_anchor_points(_all_contact_anchors(hand), poses)
    d2, idx = nearest_neighbor(anchors, obj.surface.points)
    sel = idx[d2 <= threshold * threshold]
    return ContactSet(obj.surface.points[sel], -obj.surface.normals[sel])


def total_loss(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
               weights: LossWeights | None = None, functional_finger: str = "index",
               contact_threshold: float = DEFAULT_CONTACT_THRESHOLD) -> tuple:
    """Weighted five-term loss; returns (total, LossBreakdown of raw terms).

    Equal by construction to evaluating the five loss_* functions at the
    same configuration; kinematics and prune structures are shared here
    because this sits inside finite-difference and optimization loops.
    """
    if weights is None:
        weights = LossWeights()
    target_f = obj.functional_points()
    target_g = obj.grasping_points()
    if target_f.shape[0] == 0 or target_g.shape[0] == 0:
        raise ValueError("object functional and grasping parts must be non-empty")
    if contact_threshold <= 0:
        raise ValueError("contact_threshold must be positive")
    poses = forward_kinematics(hand, config)
    st = _hand_statics(hand)
    lf = _chamfer_value(
        _world_anchor_points(_functional_groups(hand, functional_finger), poses), target_f
    )
    lg = _chamfer_value(
        _world_anchor_points(_group_by_link(hand.grasping_anchors), poses), target_g
    )
    lfc = loss_force_closure(_contacts_from_poses(hand, poses, obj, contact_threshold))
    lip = _interpenetration_from_poses(hand, poses, obj.surface.points, st)
    lsp = _self_penetration_from_poses(hand, poses, st)
    total = (weights.lambda_f * lf + weights.lambda_g * lg + weights.lambda_fc * lfc
             + weights.lambda_ip * lip + weights.lambda_sp * lsp)
    return total, LossBreakdown(lf, lg, lfc, lip, lsp, total)


# ---------------------------------------------------------------------------
# tape construction


def _root_rotation_node(delta, rotation: np.ndarray):
    """exp(skew(delta)) @ R(rotation) with delta evaluated at zero."""
    s = ad.asum(ad.mul(delta, delta))
    k = ad.add(
        ad.mul(ad.reshape(delta[0], (1, 1)), _SKEW_BASIS[0]),
        ad.add(
            ad.mul(ad.reshape(delta[1], (1, 1)), _SKEW_BASIS[1]),
            ad.mul(ad.reshape(delta[2], (1, 1)), _SKEW_BASIS[2]),
        ),
    )
    spin = ad.add(
        np.eye(3),
        ad.add(ad.mul(ad.so3_a(s), k), ad.mul(ad.so3_b(s), ad.matmul(k, k))),
    )
    return ad.matmul(spin, tf.quat_to_matrix(rotation))


def _anchor_points_node(groups, rots, poss):
    parts = [transform_points_tape(rots[l], poss[l], pts) for l, pts in groups]
    return parts[0] if len(parts) == 1 else ad.concatenate(parts, axis=0)


def _chamfer_node(a_node, b: np.ndarray):
    """Squared chamfer with nearest neighbors frozen at the current values."""
    av = a_node.value
    _, idx_ab = nearest_neighbor(av, b)
    d1 = ad.sub(a_node, b[idx_ab])
    term1 = ad.mul(ad.asum(ad.mul(d1, d1)), 1.0 / av.shape[0])
    _, idx_ba = nearest_neighbor(b, av)
    d2 = ad.sub(ad.getitem(a_node, idx_ba), b)
    term2 = ad.mul(ad.asum(ad.mul(d2, d2)), 1.0 / b.shape[0])
    return ad.add(term1, term2)


def _prim_depth_node(prim, local):
    """(k, 1) clamped penetration of link-frame points into one primitive."""
    rot = prim.pose[:3, :3]
    pos = prim.pose[:3, 3]
    p = ad.matmul(ad.sub(local, pos), rot)
    if prim.kind == "sphere":
        d2 = ad.matmul(ad.mul(p, p), _ONES_COL)
        sdf = ad.sub(ad.sqrt(ad.maximum(d2, 1e-30)), prim.radius)
    elif prim.kind == "capsule":
        z = ad.matmul(p, _EZ_COL)
        z = ad.minimum(ad.maximum(z, -prim.half_length), prim.half_length)
        d = ad.sub(p, ad.mul(z, _EZ_ROW))
        d2 = ad.matmul(ad.mul(d, d), _ONES_COL)
        sdf = ad.sub(ad.sqrt(ad.maximum(d2, 1e-30)), prim.radius)
    else:
        q = ad.sub(ad.maximum(p, ad.neg(p)), prim.half_extents)
        qp = ad.relu(q)
        o2 = ad.matmul(ad.mul(qp, qp), _ONES_COL)
        outside = ad.sqrt(ad.maximum(o2, 1e-30))
        inside = ad.minimum(ad.amax(q, axis=1, keepdims=True), 0.0)
        sdf = ad.add(outside, inside)
    return ad.relu(ad.neg(sdf))


def _local_points_node(pts, rot, pos):
    """World points (node or array) into a link frame with tape-valued pose."""
    return ad.matmul(ad.sub(pts, pos), rot)


def _node_value(x) -> np.ndarray:
    return x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=np.float64)


def _part_penetration_node(hand, rots, poss, pts, pts_value, links, radii,
                           near_all=None):
    """Tape analogue of _part_penetration; None when every primitive is pruned.

    The part's primitives are evaluated on the union of the per-link
    candidate sets so the per-point maximum folds over same-shape nodes;
    separated primitives contribute an exact zero and are skipped.
    near_all, when given, must be the same (n_points, n_links) ball matrix
    the plain evaluation used, keeping both prune sets identical.
    """
    if near_all is None:
        per_link = {}
        for l in links:
            center = _node_value(poss[l])
            per_link[l] = np.linalg.norm(pts_value - center, axis=1) <= radii[l]
    else:
        per_link = {l: near_all[:, l] for l in links}
    near = np.zeros(pts_value.shape[0], dtype=bool)
    for l in links:
        near |= per_link[l]
    if not near.any():
        return None
    idx = np.flatnonzero(near)
    sub = ad.getitem(pts, idx) if isinstance(pts, ad.Node) else pts_value[idx]
    pen = None
    for l in links:
        if not per_link[l][idx].any():
            continue
        local = _local_points_node(sub, rots[l], poss[l])
        for prim in hand.links[l].primitives:
            depth = _prim_depth_node(prim, local)
            pen = depth if pen is None else ad.maximum(pen, depth)
    return None if pen is None else ad.asum(pen)


def _build_loss_tape(hand, config, obj, weights, functional_finger, contact_threshold,
                     leaves=None):
    """Five-term loss on the tape; returns (total, LossBreakdown, leaves).

    total is a Node unless no differentiable term survives (zero weight or
    provably inactive), in which case it is a plain float. The breakdown
    always carries all five raw terms.
    """
    groups_f = _functional_groups(hand, functional_finger)
    groups_g = _group_by_link(hand.grasping_anchors)
    target_f = obj.functional_points()
    target_g = obj.grasping_points()
    if target_f.shape[0] == 0 or target_g.shape[0] == 0:
        raise ValueError("object functional and grasping parts must be non-empty")
    if leaves is None:
        t = ad.leaf(config.translation)
        delta = ad.leaf(np.zeros(3))
        theta = ad.leaf(config.joint_angles)
    else:
        t, delta, theta = leaves
    rot_node = _root_rotation_node(delta, config.rotation)
    rots, poss = forward_kinematics_tape(hand, rot_node, t, theta)
    poses = [tf.make_transform(_node_value(r), _node_value(p)) for r, p in zip(rots, poss)]
    st = _hand_statics(hand)

    nodes = {}
    raw = {}
    if weights.lambda_f > 0:
        nodes["f"] = _chamfer_node(_anchor_points_node(groups_f, rots, poss), target_f)
    else:
        raw["f"] = _chamfer_value(_world_anchor_points(groups_f, poses), target_f)
    if weights.lambda_g > 0:
        nodes["g"] = _chamfer_node(_anchor_points_node(groups_g, rots, poss), target_g)
    else:
        raw["g"] = _chamfer_value(_world_anchor_points(groups_g, poses), target_g)

    # L_FC never contributes a gradient: the contact points and cone axes
    # are frozen surface samples, locally constant in the configuration.
    raw["fc"] = loss_force_closure(_contacts_from_poses(hand, poses, obj, contact_threshold))

    centers = np.array([pose[:3, 3] for pose in poses])
    near_all = _near_matrix(obj.surface.points, centers, st.radii)
    if weights.lambda_ip > 0:
        acc = None
        for links in st.parts.values():
            term = _part_penetration_node(hand, rots, poss, obj.surface.points,
                                          obj.surface.points, links, st.radii, near_all)
            if term is not None:
                acc = term if acc is None else ad.add(acc, term)
        if acc is None:
            raw["ip"] = 0.0
        else:
            nodes["ip"] = ad.reshape(acc, ())
    else:
        raw["ip"] = _interpenetration_from_poses(hand, poses, obj.surface.points, st,
                                                 near_all)

    if weights.lambda_sp > 0:
        acc = _self_penetration_nodes(hand, rots, poss, poses, st)
        if acc is None:
            raw["sp"] = 0.0
        else:
            nodes["sp"] = ad.reshape(acc, ())
    else:
        raw["sp"] = _self_penetration_from_poses(hand, poses, st)

    for key, node in nodes.items():
        raw[key] = float(_node_value(node))
    lam = {"f": weights.lambda_f, "g": weights.lambda_g, "fc": weights.lambda_fc,
           "ip": weights.lambda_ip, "sp": weights.lambda_sp}
    const = sum(lam[k] * raw[k] for k in raw if k not in nodes)
    total = None
    for key, node in nodes.items():
        term = ad.mul(node, lam[key])
        total = term if total is None else ad.add(total, term)
    total = const if total is None else ad.add(total, const)
    bd = LossBreakdown(raw["f"], raw["g"], raw["fc"], raw["ip"], raw["sp"],
                       float(_node_value(total)))
    return total, bd, (t, delta, theta)


def _self_penetration_nodes(hand, rots, poss, poses, st: _HandStatics):
    """Sum node over ordered part pairs, or None when every pair is separated."""
    sep = _pair_sep_matrix(st, poses)
    posed_nodes: dict = {}
    acc = None
    for pi, links_i in st.parts.items():
        for pj, links_j in st.parts.items():
            if pi == pj:
                continue
            if sep[np.ix_(links_i, links_j)].all():
                continue
            for lj in links_j:
                if lj not in posed_nodes:
                    posed_nodes[lj] = transform_points_tape(
                        rots[lj], poss[lj], hand.links[lj].surface_points.points
                    )
            parts_j = [posed_nodes[lj] for lj in links_j]
            pts_j = parts_j[0] if len(parts_j) == 1 else ad.concatenate(parts_j, axis=0)
            term = _part_penetration_node(hand, rots, poss, pts_j, _node_value(pts_j),
                                          links_i, st.radii)
            if term is not None:
                acc = term if acc is None else ad.add(acc, term)
    return acc


def loss_gradient(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
                  weights: LossWeights | None = None, functional_finger: str = "index",
                  contact_threshold: float = DEFAULT_CONTACT_THRESHOLD) -> np.ndarray:
    """Gradient of the total loss over (translation, rotation tangent, joints).

    The rotation block is with respect to an axis-angle increment applied
    on the left of the current quaternion, evaluated at zero increment.
    """
    if weights is None:
        weights = LossWeights()
    total, _, (t, delta, theta) = _build_loss_tape(
        hand, config, obj, weights, functional_finger, contact_threshold
    )
    g = np.zeros(6 + hand.dof)
    if isinstance(total, ad.Node):
        grads = ad.backward(total)
        for sl, leaf in ((slice(0, 3), t), (slice(3, 6), delta), (slice(6, None), theta)):
            got = grads.get(id(leaf))
            if got is not None:
                g[sl] = got
    return g


# ---------------------------------------------------------------------------
# kink detection for gradient checks


def _tie_straddle(p: np.ndarray, q: np.ndarray, h: float) -> bool:
    """True when a nearest-neighbor flip from p into q could fall inside an
    FD stencil of half-width h.

    The winner between the two closest candidates can only change within
    the stencil if the current gap is below the gap's rate of change times
    h. That rate is bounded by ||u1 - u2|| for a common translation of p
    plus ||q1 - q2|| for motions that move the candidates differentially
    (rotations, joints, lever arms under ~1 m). An 8x safety factor and a
    tiny floor for exact ties round out the test. Dense sample sets tie
    often but with near-parallel directions, so this stays selective where
    a fixed gap band fires on almost every configuration.
    """
    if q.shape[0] < 2:
        return False
    d2 = np.sum((p[:, None, :] - q[None, :, :]) ** 2, axis=2)
    rows = np.arange(p.shape[0])
    part = np.argpartition(d2, 1, axis=1)[:, :2]
    dd = np.sqrt(d2[rows[:, None], part])
    order = np.argsort(dd, axis=1)
    dd = np.take_along_axis(dd, order, axis=1)
    part = np.take_along_axis(part, order, axis=1)
    q1 = q[part[:, 0]]
    q2 = q[part[:, 1]]
    u1 = (q1 - p) / np.maximum(dd[:, :1], 1e-12)
    u2 = (q2 - p) / np.maximum(dd[:, 1:], 1e-12)
    slope = np.linalg.norm(u1 - u2, axis=1) + np.linalg.norm(q1 - q2, axis=1)
    return bool(np.any(dd[:, 1] - dd[:, 0] < slope * (8.0 * h) + 1e-12))


def _part_sdf_kink(hand, poses, points, links, radii, sdf_tol, gap_tol) -> bool:
    """Clamp kinks (|sdf| near 0) or near-tied deepest primitives in one part."""
    best = np.full(points.shape[0], np.inf)
    second = np.full(points.shape[0], np.inf)
    for l in links:
        pose = poses[l]
        near = np.linalg.norm(points - pose[:3, 3], axis=1) <= radii[l] + sdf_tol
        if not near.any():
            continue
        local = tf.transform_points(tf.transform_inverse(pose), points[near])
        for prim in hand.links[l].primitives:
            s = primitive_signed_distance(prim, local)
            b = best[near]
            c = second[near]
            lower = s < b
            second[near] = np.where(lower, b, np.minimum(c, s))
            best[near] = np.where(lower, s, b)
    finite = np.isfinite(best)
    if np.any(np.abs(best[finite]) < sdf_tol):
        return True
    pen = finite & (best < 0) & np.isfinite(second)
    return bool(np.any(second[pen] - best[pen] < gap_tol))


def near_loss_kink(hand: HandModel, config: GraspConfiguration, obj: AffordanceObject,
                   functional_finger: str = "index",
                   contact_threshold: float = DEFAULT_CONTACT_THRESHOLD,
                   sdf_tol: float = 1e-3, fd_step: float = 1e-5,
                   gap_tol: float = 1e-4) -> bool:
    """True when the loss is within tolerance of a non-smooth point.

    Checked families: penetration clamps within sdf_tol of zero and
    near-tied deepest primitives (object-hand and hand-hand), chamfer
    nearest-neighbor flips reachable by an FD stencil of half-width
    fd_step, and anchors near the contact threshold or with tied nearest
    surface samples. Gradient checks resample flagged configurations.
    """
    poses = forward_kinematics(hand, config)
    for groups, target in (
        (_functional_groups(hand, functional_finger), obj.functional_points()),
        (_group_by_link(hand.grasping_anchors), obj.grasping_points()),
    ):
        a = _world_anchor_points(groups, poses)
        if _tie_straddle(a, target, fd_step) or _tie_straddle(target, a, fd_step):
            return True
    anchors = _world_anchor_points(_all_contact_anchors(hand), poses)
    d2, _ = nearest_neighbor(anchors, obj.surface.points)
    d = np.sqrt(d2)
    if np.any(np.abs(d - contact_threshold) < 8.0 * fd_step):
        return True
    # contact flips change L_FC by a discrete jump, so give them 4x headroom
    near = d <= contact_threshold + 8.0 * fd_step
    if near.any() and _tie_straddle(anchors[near], obj.surface.points, 4.0 * fd_step):
        return True
    st = _hand_statics(hand)
    radii, parts = st.radii, st.parts
    for links in parts.values():
        if _part_sdf_kink(hand, poses, obj.surface.points, links, radii, sdf_tol, gap_tol):
            return True
    posed: dict = {}
    for pi, links_i in parts.items():
        for pj, links_j in parts.items():
            if pi == pj:
                continue
            for lj in links_j:
                if lj not in posed:
                    posed[lj] = tf.transform_points(poses[lj], hand.links[lj].surface_points.points)
            pts_j = np.vstack([posed[lj] for lj in links_j])
            if _part_sdf_kink(hand, poses, pts_j, links_i, radii, sdf_tol, gap_tol):
                return True
    return False


# ---------------------------------------------------------------------------
# initialization


def _min_surface_sdf(obj: AffordanceObject, pts: np.ndarray) -> float:
    """Min signed mesh distance over pts, prefiltered through the sample cloud.

    Samples lie on the mesh, so the sample distance upper-bounds the mesh
    distance and undershoots it by at most the cloud covering radius; a
    2.5 cm candidate band is exact for the minimum as long as penetration
    stays shallower than that, which the contact march guarantees.
    """
    d2, _ = nearest_neighbor(pts, obj.surface.points)
    d = np.sqrt(d2)
    cand = d <= d.min() + 0.025
    return float(mesh_signed_distance(obj.mesh, pts[cand]).min())


def _march_to_contact(obj: AffordanceObject, base: np.ndarray, direction: np.ndarray,
                      alpha0: float) -> float:
    """Largest alpha <= alpha0 where the cloud base + alpha*direction touches.

    Touching means min SDF in [0, 5e-5]. Sphere-traces while clear (the min
    SDF is 1-Lipschitz in alpha), then brackets the first sign change with
    fixed 0.25 mm steps and bisects. Raises InitFailure after 1 m of travel
    beyond the stand-off without contact.
    """
    cap = alpha0 + 1.0
    alpha = alpha0
    s = _min_surface_sdf(obj, base + alpha * direction)
    if s <= 0:
        raise InitFailure("stand-off configuration already intersects the object")
    while True:
        while s > 5e-4:
            alpha -= s
            if alpha0 - alpha > cap:
                raise InitFailure("no hand-object contact within 1 m of travel")
            s = _min_surface_sdf(obj, base + alpha * direction)
        if 0.0 <= s <= 5e-5:
            return alpha
        hi = alpha
        bracketed = False
        while s <= 5e-4:
            alpha -= 2.5e-4
            if alpha0 - alpha > cap:
                raise InitFailure("no hand-object contact within 1 m of travel")
            s = _min_surface_sdf(obj, base + alpha * direction)
            if s < 0.0:
                bracketed = True
                break
            if s <= 5e-5:
                return alpha
            hi = alpha
        if not bracketed:
            continue  # grazed past the surface; resume the sphere trace
        lo = alpha
        while hi - lo > 1e-6:
            mid = 0.5 * (hi + lo)
            if _min_surface_sdf(obj, base + mid * direction) < 0.0:
                lo = mid
            else:
                hi = mid
        return hi


def axis_align_init(hand: HandModel, obj: AffordanceObject, functional_finger: str,
                    thumb_variant: int | None = None,
                    settings: OptimizerSettings | None = None,
                    fa_sign: int | None = None, azimuth: float = 0.0,
                    weights: LossWeights | None = None) -> GraspConfiguration:
    """Axis-aligned, contact-but-no-penetration starting configuration.

    Rotates the hand GF onto the object GF, then about GF so the press
    directions agree (both FA signs are tried unless fa_sign forces one;
    the lower-scoring candidate is dropped), flexes the flexion joints by
    init_flex, and slides the hand in along -GF until its surface cloud
    first touches the mesh with zero penetration. azimuth adds an extra
    rotation about GF on top of the FA alignment; it preserves the GF
    alignment exactly and exists for batch diversity.
    """
    if settings is None:
        settings = OptimizerSettings()
    if fa_sign not in (None, 1, -1):
        raise ValueError("fa_sign must be None, 1, or -1")
    axes = object_axes(obj)
    theta = np.zeros(hand.dof)
    theta[hand.flexion_joints()] = settings.init_flex
    theta = project_to_limits(hand, theta)
    flexed = GraspConfiguration(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), theta)
    gf_h, fa_h = hand_axes(hand, flexed, functional_finger, thumb_variant)
    r1 = tf.rotation_between(gf_h, axes.gf)
    local_pts = hand_surface_points(hand, flexed).points
    r_hand = float(np.linalg.norm(local_pts - hand.grasp_center, axis=1).max())
    c_grasp = obj.grasping_points().mean(axis=0)
    r_obj = float(np.linalg.norm(obj.surface.points - c_grasp, axis=1).max())
    alpha0 = r_hand + r_obj + 0.01

    fa_rotated = r1 @ fa_h  # orthogonal to the object GF by construction
    best = None
    for sign in ((fa_sign,) if fa_sign is not None else (1, -1)):
        target = sign * axes.fa
        angle = float(np.arctan2(np.cross(fa_rotated, target) @ axes.gf, fa_rotated @ target))
        rot = tf.rotvec_to_matrix(axes.gf * (angle + azimuth)) @ r1
        base = (local_pts - hand.grasp_center) @ rot.T + c_grasp
        alpha = _march_to_contact(obj, base, axes.gf, alpha0)
        config = GraspConfiguration(
            c_grasp + alpha * axes.gf - rot @ hand.grasp_center,
            tf.matrix_to_quat(rot),
            theta.copy(),
        )
        score, _ = total_loss(hand, config, obj, weights, functional_finger,
                              settings.contact_threshold)
        if best is None or score < best[0]:
            best = (score, config)
    return best[1]


# ---------------------------------------------------------------------------
# optimization


def optimize_grasp(hand: HandModel, obj: AffordanceObject, init: GraspConfiguration,
                   weights: LossWeights | None = None,
                   settings: OptimizerSettings | None = None,
                   functional_finger: str = "index") -> tuple:
    """Adam descent on the tangent parameterization from an initial config.

    Each step folds the rotation increment into the quaternion and projects
    joint angles to their limits; Adam moments live on the tangent
    coordinates throughout. Returns (best configuration seen, trajectory);
    trajectory[k] is the LossBreakdown at the configuration entering step k.
    """
    if weights is None:
        weights = LossWeights()
    if settings is None:
        settings = OptimizerSettings()
    t = ad.leaf(init.translation)
    delta = ad.leaf(np.zeros(3))
    theta = ad.leaf(init.joint_angles)
    adam = ad.Adam([t, delta, theta], step_size=settings.step_size, betas=settings.adam_betas)
    quat = init.rotation.copy()
    config = GraspConfiguration(t.value.copy(), quat.copy(), theta.value.copy())
    best_total = np.inf
    best_config = config
    trajectory = []
    for step in range(settings.max_steps):
        total, bd, _ = _build_loss_tape(
            hand, config, obj, weights, functional_finger, settings.contact_threshold,
            leaves=(t, delta, theta),
        )
        if not np.isfinite(bd.total):
            if step == 0:
                raise SynthesisError("non-finite loss at the initial configuration")
            break
        trajectory.append(bd)
        if bd.total < best_total:
            best_total = bd.total
            best_config = config
        if isinstance(total, ad.Node):
            grads = ad.backward(total)
            adam.step([
                grads.get(id(t), np.zeros(3)),
                grads.get(id(delta), np.zeros(3)),
                grads.get(id(theta), np.zeros(hand.dof)),
            ])
            quat = tf.quat_normalize(tf.quat_multiply(tf.quat_from_rotvec(delta.value), quat))
            delta.value[:] = 0.0
            theta.value[:] = project_to_limits(hand, theta.value)
        config = GraspConfiguration(t.value.copy(), quat.copy(), theta.value.copy())
    final_total, _ = total_loss(hand, config, obj, weights, functional_finger,
                                settings.contact_threshold)
    if np.isfinite(final_total) and final_total < best_total:
        best_config = config
    return best_config, trajectory


def trajectory_to_csv(trajectory) -> str:
    """CSV dump of a loss trajectory: step, the five raw terms, total."""
    lines = ["step,loss_f,loss_g,loss_fc,loss_ip,loss_sp,total"]
    for k, bd in enumerate(trajectory):
        lines.append(",".join([str(k)] + [repr(float(v)) for v in bd]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batch synthesis


def _draw_plan(hand: HandModel, index: int, child: np.random.SeedSequence) -> tuple:
    rng = np.random.default_rng(child)
    finger = str(rng.choice(hand.fingers))
    variant = int(rng.integers(1, 4)) if finger == "thumb" else None
    sign = int(rng.choice((-1, 1)))
    azimuth = float(rng.normal(0.0, 0.2))
    return (index, finger, variant, sign, azimuth)


def _run_plan(plan, hand, obj, weights, settings):
    index, finger, variant, sign, azimuth = plan
    try:
        init = axis_align_init(hand, obj, finger, variant, settings,
                               fa_sign=sign, azimuth=azimuth, weights=weights)
        config, _ = optimize_grasp(hand, obj, init, weights, settings,
                                   functional_finger=finger)
        _, bd = total_loss(hand, config, obj, weights, finger, settings.contact_threshold)
        return SynthesisResult(index, finger, variant, sign, azimuth, config, bd)
    except (SynthesisError, ValueError) as exc:
        return SynthesisResult(index, finger, variant, sign, azimuth, None, None, str(exc))


def synthesize_batch(hand: HandModel, obj: AffordanceObject, n: int,
                     weights: LossWeights | None = None,
                     settings: OptimizerSettings | None = None) -> list:
    """n independent seeded runs varying finger, thumb variant, FA sign, azimuth.

    Results come back in run order, failures recorded per run rather than
    raised. Runs are pure functions of (hand, object, derived seed), so
    GRASPSYNTH_WORKERS > 1 fans them out over a process pool with output
    identical to the serial path.
    """
    if n < 1:
        raise ValueError("need n >= 1 runs")
    if weights is None:
        weights = LossWeights()
    if settings is None:
        settings = OptimizerSettings()
    children = np.random.SeedSequence(settings.seed).spawn(n)
    plans = [_draw_plan(hand, i, child) for i, child in enumerate(children)]
    workers = int(os.environ.get("GRASPSYNTH_WORKERS", "1"))
    if workers > 1:
        import functools
        import multiprocessing

        run = functools.partial(_run_plan, hand=hand, obj=obj,
                                weights=weights, settings=settings)
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(run, plans)
    return [_run_plan(p, hand, obj, weights, settings) for p in plans]
