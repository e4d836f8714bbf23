"""Articulated hand model with differentiable forward kinematics.

A hand is a tree of rigid links connected by revolute joints, loaded from
a JSON description file. Each link carries convex collision primitives
and a pre-sampled surface point cloud in its own frame; anchor point sets
and per-finger axis declarations drive grasp initialization and the
attraction losses.

Description file schema (lengths in meters, angles in radians):

    {
      "name": str,
      "links": [
        {"name": str, "part": "palm|thumb|index|middle|ring|little",
         "primitives": [
           {"type": "sphere", "center": [x,y,z], "radius": r},
           {"type": "capsule", "p0": [x,y,z], "p1": [x,y,z], "radius": r},
           {"type": "box", "center": [x,y,z], "half_extents": [x,y,z],
            "rotation": [w,x,y,z]?}
         ],
         "surface_points": [[x,y,z], ...],
         "surface_normals": [[x,y,z], ...]?}
      ],
      "joints": [
        {"name": str, "parent": link name, "child": link name,
         "axis": [x,y,z], "origin": {"translation": [x,y,z],
         "rotation": [w,x,y,z]?}, "limits": [lower, upper],
         "flexion": bool?}
      ],
      "anchors": {
        "functional": {finger: [{"link": name, "point": [x,y,z]}, ...]},
        "grasping": [{"link": name, "point": [x,y,z]}, ...]
      },
      "grasp_center": [x,y,z]?,
      "axes": {
        "fa": {finger: [x,y,z]},
        "thumb_gf": [[x,y,z], [x,y,z], [x,y,z]]
      }
    }

Joint axes are expressed in the joint frame reached after applying the
origin transform; with an identity origin rotation this coincides with
the parent link frame. The palm is the root link and must be no joint's
child. Axis declarations in "axes" are palm-frame unit vectors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .geometry import ConvexPrimitive, PointCloud

PART_IDS = ("palm", "thumb", "index", "middle", "ring", "little")
FINGER_IDS = PART_IDS[1:]

_DATA_DIR = Path(__file__).parent / "data" / "hands"


class HandLoadError(ValueError):
    """A hand description file failed validation; message carries the field path."""


@dataclass(frozen=True)
class Joint:
    name: str
    parent_link: int
    child_link: int
    axis: np.ndarray  # unit, in the post-origin joint frame
    origin: np.ndarray  # 4x4, joint frame in the parent link frame
    limits: tuple[float, float]
    flexion: bool = False  # participates in the flexed-pose initialization


@dataclass(frozen=True)
class Link:
    name: str
    part_id: str
    primitives: tuple
    surface_points: PointCloud


@dataclass(frozen=True)
class Anchor:
    link: int
    point: np.ndarray  # link frame


@dataclass(frozen=True)
class HandModel:
    name: str
    links: tuple
    joints: tuple
    functional_anchors: dict  # finger -> tuple of Anchor
    grasping_anchors: tuple
    grasp_center: np.ndarray  # palm frame
    fa_directions: dict  # finger -> palm-frame unit press direction
    thumb_gf_axes: np.ndarray  # (3, 3) palm-frame variants, or empty
    root: int = 0
    topo_order: tuple = field(default=())  # joint indices, parents first

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def fingers(self) -> tuple:
        return tuple(self.functional_anchors.keys())

    def part_links(self) -> dict:
        """Link indices grouped by part id, in link order."""
        groups: dict = {}
        for i, link in enumerate(self.links):
            groups.setdefault(link.part_id, []).append(i)
        return groups

    def flexion_joints(self) -> np.ndarray:
        return np.array([i for i, j in enumerate(self.joints) if j.flexion], dtype=int)

    def limits_array(self) -> np.ndarray:
        return np.array([j.limits for j in self.joints], dtype=np.float64)


@dataclass
class GraspConfiguration:
    """Root pose plus joint angles; the optimization variable."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    joint_angles: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.joint_angles = np.asarray(self.joint_angles, dtype=np.float64)
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if self.rotation.shape != (4,):
            raise ValueError("rotation must be a quaternion (w, x, y, z)")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-8:
            raise ValueError("rotation quaternion must be unit-norm within 1e-8")
        if self.joint_angles.ndim != 1:
            raise ValueError("joint_angles must be a flat vector")

    @classmethod
    def identity(cls, hand: HandModel) -> "GraspConfiguration":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(hand.dof))

    def root_transform(self) -> np.ndarray:
        return tf.make_transform(tf.quat_to_matrix(self.rotation), self.translation)


def bundled_hand_path(name: str) -> Path:
    """Path of a hand description file shipped with the package."""
    path = _DATA_DIR / f"{name}.json"
    if not path.is_file():
        have = sorted(p.stem for p in _DATA_DIR.glob("*.json"))
        raise FileNotFoundError(f"no bundled hand '{name}'; available: {have}")
    return path


def _vec(obj, path, n=3):
    arr = np.asarray(obj, dtype=np.float64)
    if arr.shape != (n,) or not np.isfinite(arr).all():
        raise HandLoadError(f"{path}: expected {n} finite numbers")
    return arr


def _quat(obj, path):
    q = _vec(obj, path, 4)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise HandLoadError(f"{path}: quaternion must be unit-norm within 1e-6")
    return q / np.linalg.norm(q)


def _unit(obj, path):
    v = _vec(obj, path)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-6:
        raise HandLoadError(f"{path}: expected a unit vector (got norm {n:.6g})")
    return v / n


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise HandLoadError(f"{path}.{key}: missing required field")
    return obj[key]


def _parse_primitive(spec, path) -> ConvexPrimitive:
    kind = _require(spec, "type", path)
    try:
        if kind == "sphere":
            return ConvexPrimitive.sphere(
                _vec(_require(spec, "center", path), f"{path}.center"),
                float(_require(spec, "radius", path)),
            )
        if kind == "capsule":
            return ConvexPrimitive.capsule(
                _vec(_require(spec, "p0", path), f"{path}.p0"),
                _vec(_require(spec, "p1", path), f"{path}.p1"),
                float(_require(spec, "radius", path)),
            )
        if kind == "box":
            rot = None
            if "rotation" in spec:
                rot = tf.quat_to_matrix(_quat(spec["rotation"], f"{path}.rotation"))
            return ConvexPrimitive.box(
                _vec(_require(spec, "center", path), f"{path}.center"),
                _vec(_require(spec, "half_extents", path), f"{path}.half_extents"),
                rotation=rot,
            )
    except ValueError as err:
        if isinstance(err, HandLoadError):
            raise
        raise HandLoadError(f"{path}: {err}") from err
    raise HandLoadError(f"{path}.type: unknown primitive type '{kind}'")


def _parse_link(spec, path) -> Link:
    name = _require(spec, "name", path)
    part = _require(spec, "part", path)
    if part not in PART_IDS:
        raise HandLoadError(f"{path}.part: '{part}' is not one of {PART_IDS}")
    prim_specs = _require(spec, "primitives", path)
    if not prim_specs:
        raise HandLoadError(f"{path}.primitives: every link needs at least one primitive")
    prims = tuple(
        _parse_primitive(p, f"{path}.primitives[{i}]") for i, p in enumerate(prim_specs)
    )
    pts = np.asarray(_require(spec, "surface_points", path), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise HandLoadError(f"{path}.surface_points: expected a non-empty (N, 3) array")
    normals = None
    if "surface_normals" in spec:
        normals = np.asarray(spec["surface_normals"], dtype=np.float64)
    try:
        cloud = PointCloud(pts, normals)
    except ValueError as err:
        raise HandLoadError(f"{path}.surface_points: {err}") from err
    return Link(name, part, prims, cloud)


def _parse_joint(spec, path, link_index) -> Joint:
    name = _require(spec, "name", path)
    parent = _require(spec, "parent", path)
    child = _require(spec, "child", path)
    for role, link_name in (("parent", parent), ("child", child)):
        if link_name not in link_index:
            raise HandLoadError(f"{path}.{role}: unknown link '{link_name}'")
    axis = _unit(_require(spec, "axis", path), f"{path}.axis")
    origin_spec = _require(spec, "origin", path)
    trans = _vec(_require(origin_spec, "translation", path + ".origin"), f"{path}.origin.translation")
    rot = np.eye(3)
    if "rotation" in origin_spec:
        rot = tf.quat_to_matrix(_quat(origin_spec["rotation"], f"{path}.origin.rotation"))
    limits = _require(spec, "limits", path)
    lo, up = float(limits[0]), float(limits[1])
    if lo > up:
        raise HandLoadError(f"{path}.limits: lower {lo} > upper {up} (joint '{name}')")
    return Joint(
        name=name,
        parent_link=link_index[parent],
        child_link=link_index[child],
        axis=axis,
        origin=tf.make_transform(rot, trans),
        limits=(lo, up),
        flexion=bool(spec.get("flexion", False)),
    )


def _parse_anchor(spec, path, link_index) -> Anchor:
    link_name = _require(spec, "link", path)
    if link_name not in link_index:
        raise HandLoadError(f"{path}.link: anchor references unknown link '{link_name}'")
    return Anchor(link_index[link_name], _vec(_require(spec, "point", path), f"{path}.point"))


def load_hand(description_file) -> HandModel:
    """Load and validate a hand description file."""
    path = Path(description_file)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise HandLoadError(f"{path}: cannot parse hand description ({err})") from err

    link_specs = _require(raw, "links", "hand")
    if not link_specs:
        raise HandLoadError("hand.links: at least one link is required")
    links = tuple(_parse_link(s, f"hand.links[{i}]") for i, s in enumerate(link_specs))
    names = [l.name for l in links]
    if len(set(names)) != len(names):
        raise HandLoadError("hand.links: link names must be unique")
    link_index = {n: i for i, n in enumerate(names)}

    joint_specs = raw.get("joints", [])
    joints = tuple(
        _parse_joint(s, f"hand.joints[{i}]", link_index) for i, s in enumerate(joint_specs)
    )
    jnames = [j.name for j in joints]
    if len(set(jnames)) != len(jnames):
        raise HandLoadError("hand.joints: joint names must be unique")

    # tree structure: unique parent joint per non-root link, root is the palm
    parent_joint = {}
    for i, j in enumerate(joints):
        if j.child_link in parent_joint:
            raise HandLoadError(
                f"hand.joints[{i}]: link '{links[j.child_link].name}' has multiple parent joints"
            )
        parent_joint[j.child_link] = i
    roots = [i for i in range(len(links)) if i not in parent_joint]
    if len(roots) != 1:
        raise HandLoadError(
            f"hand.joints: expected exactly one root link, found {[names[r] for r in roots]}"
        )
    root = roots[0]
    if links[root].part_id != "palm":
        raise HandLoadError(f"hand.links: root link '{names[root]}' must be the palm")

    # reachability from the root; anything unreached sits on a cycle
    children: dict = {}
    for i, j in enumerate(joints):
        children.setdefault(j.parent_link, []).append(i)
    topo = []
    seen = {root}
    stack = [root]
    while stack:
        link = stack.pop()
        for ji in sorted(children.get(link, []), reverse=True):
            topo.append(ji)
            child = joints[ji].child_link
            if child in seen:
                raise HandLoadError(
                    f"hand.joints: cycle detected through link '{names[child]}'"
                )
            seen.add(child)
            stack.append(child)
    if len(seen) != len(links):
        missing = [n for i, n in enumerate(names) if i not in seen]
        raise HandLoadError(f"hand.joints: links unreachable from the palm (cycle?): {missing}")

    anchor_spec = _require(raw, "anchors", "hand")
    functional = {}
    for finger, items in _require(anchor_spec, "functional", "hand.anchors").items():
        if finger not in FINGER_IDS:
            raise HandLoadError(f"hand.anchors.functional: '{finger}' is not a finger part")
        if not items:
            raise HandLoadError(f"hand.anchors.functional.{finger}: needs at least one anchor")
        functional[finger] = tuple(
            _parse_anchor(a, f"hand.anchors.functional.{finger}[{i}]", link_index)
            for i, a in enumerate(items)
        )
    if not functional:
        raise HandLoadError("hand.anchors.functional: at least one finger is required")
    grasp_items = _require(anchor_spec, "grasping", "hand.anchors")
    if not grasp_items:
        raise HandLoadError("hand.anchors.grasping: needs at least one anchor")
    grasping = tuple(
        _parse_anchor(a, f"hand.anchors.grasping[{i}]", link_index)
        for i, a in enumerate(grasp_items)
    )

    axes_spec = _require(raw, "axes", "hand")
    fa = {}
    for finger in functional:
        fa_spec = _require(_require(axes_spec, "fa", "hand.axes"), finger, "hand.axes.fa")
        fa[finger] = _unit(fa_spec, f"hand.axes.fa.{finger}")
    thumb_gf = np.zeros((0, 3))
    if "thumb" in functional:
        gf_spec = axes_spec.get("thumb_gf")
        if gf_spec is None or len(gf_spec) != 3:
            raise HandLoadError(
                "hand.axes.thumb_gf: the thumb requires exactly 3 GF axis definitions"
            )
        thumb_gf = np.stack([_unit(v, f"hand.axes.thumb_gf[{i}]") for i, v in enumerate(gf_spec)])

    hand = HandModel(
        name=str(raw.get("name", path.stem)),
        links=links,
        joints=joints,
        functional_anchors=functional,
        grasping_anchors=grasping,
        grasp_center=np.zeros(3),
        fa_directions=fa,
        thumb_gf_axes=thumb_gf,
        root=root,
        topo_order=tuple(topo),
    )
    if "grasp_center" in raw:
        center = _vec(raw["grasp_center"], "hand.grasp_center")
    else:
        # default: centroid of the grasping anchors in the palm frame
        rest = anchor_positions(hand, GraspConfiguration.identity(hand), "grasping")
        center = rest.points.mean(axis=0)
    return dataclasses.replace(hand, grasp_center=center)


def _check_config(hand: HandModel, config: GraspConfiguration):
    if config.joint_angles.shape[0] != hand.dof:
        raise ValueError(
            f"configuration has {config.joint_angles.shape[0]} joint angles, "
            f"hand '{hand.name}' has {hand.dof} joints"
        )


def forward_kinematics(hand: HandModel, config: GraspConfiguration) -> list:
    """World pose (4x4) of every link, indexed like hand.links."""
    _check_config(hand, config)
    poses: list = [None] * len(hand.links)
    poses[hand.root] = config.root_transform()
    for ji in hand.topo_order:
        joint = hand.joints[ji]
        theta = config.joint_angles[ji]
        spin = tf.make_transform(tf.rotvec_to_matrix(joint.axis * theta), np.zeros(3))
        poses[joint.child_link] = poses[joint.parent_link] @ joint.origin @ spin
    return poses


def hand_surface_points(hand: HandModel, config: GraspConfiguration) -> PointCloud:
    """Union of the link surface clouds, posed by forward kinematics."""
    poses = forward_kinematics(hand, config)
    pts = []
    normals = []
    with_normals = all(l.surface_points.normals is not None for l in hand.links)
    for link, pose in zip(hand.links, poses):
        pts.append(tf.transform_points(pose, link.surface_points.points))
        if with_normals:
            normals.append(link.surface_points.normals @ pose[:3, :3].T)
    return PointCloud(np.vstack(pts), np.vstack(normals) if with_normals else None)


def anchor_positions(
    hand: HandModel, config: GraspConfiguration, kind: str, finger: str | None = None
) -> PointCloud:
    """World positions of an anchor set: kind 'functional' (per finger) or 'grasping'."""
    if kind == "functional":
        if finger not in hand.functional_anchors:
            raise ValueError(
                f"unknown functional finger '{finger}'; hand has {sorted(hand.functional_anchors)}"
            )
        anchors = hand.functional_anchors[finger]
    elif kind == "grasping":
        anchors = hand.grasping_anchors
    else:
        raise ValueError(f"anchor set must be 'functional' or 'grasping', got '{kind}'")
    poses = forward_kinematics(hand, config)
    pts = np.stack([tf.transform_points(poses[a.link], a.point) for a in anchors])
    return PointCloud(pts)


def hand_axes(
    hand: HandModel,
    config: GraspConfiguration,
    functional_finger: str,
    thumb_variant: int | None = None,
) -> tuple:
    """World-frame (GF, FA) unit axes for the chosen functional finger.

    GF points from the grasp center toward the functional contact region
    (the thumb substitutes one of its three declared variants); FA is the
    declared press direction re-orthogonalized against GF.
    """
    if functional_finger not in hand.functional_anchors:
        raise ValueError(
            f"unknown functional finger '{functional_finger}'; "
            f"hand has {sorted(hand.functional_anchors)}"
        )
    if functional_finger == "thumb":
        if thumb_variant not in (1, 2, 3):
            raise ValueError("the thumb requires thumb_variant in {1, 2, 3}")
    elif thumb_variant is not None:
        raise ValueError("thumb_variant is only valid for the thumb")
    poses = forward_kinematics(hand, config)
    root_pose = poses[hand.root]
    rot = root_pose[:3, :3]
    if functional_finger == "thumb":
        gf = rot @ hand.thumb_gf_axes[thumb_variant - 1]
    else:
        anchors = anchor_positions(hand, config, "functional", functional_finger)
        center = tf.transform_points(root_pose, hand.grasp_center)
        gf = anchors.points.mean(axis=0) - center
        norm = np.linalg.norm(gf)
        if norm < 1e-9:
            raise ValueError(f"degenerate GF axis for finger '{functional_finger}'")
        gf = gf / norm
    press = rot @ hand.fa_directions[functional_finger]
    fa = press - (press @ gf) * gf
    norm = np.linalg.norm(fa)
    if norm < 1e-8:
        raise ValueError(f"press direction for '{functional_finger}' is parallel to GF")
    return gf, fa / norm


def project_to_limits(hand: HandModel, joint_angles: np.ndarray) -> np.ndarray:
    """Clamp joint angles into their limit intervals."""
    limits = hand.limits_array()
    return np.clip(np.asarray(joint_angles, dtype=np.float64), limits[:, 0], limits[:, 1])


def _rotate_vector(rot_node, v: np.ndarray):
    col = ad.matmul(rot_node, np.asarray(v, dtype=np.float64).reshape(3, 1))
    return ad.reshape(col, (3,))


def forward_kinematics_tape(hand: HandModel, root_rot, root_pos, theta):
    """Forward kinematics as tape nodes.

    root_rot: (3,3) node or array, root_pos: (3,) node or array,
    theta: (dof,) node. Returns per-link (rotation node, position node).
    """
    rots: list = [None] * len(hand.links)
    poss: list = [None] * len(hand.links)
    rots[hand.root] = root_rot
    poss[hand.root] = root_pos
    eye = np.eye(3)
    for ji in hand.topo_order:
        joint = hand.joints[ji]
        k = tf.skew(joint.axis)
        th = theta[ji]
        sin_th = ad.sin(th)
        cos_th = ad.cos(th)
        spin = ad.add(eye, ad.add(ad.mul(sin_th, k), ad.mul(ad.sub(1.0, cos_th), k @ k)))
        r_joint = ad.matmul(joint.origin[:3, :3], spin)
        parent_rot = rots[joint.parent_link]
        rots[joint.child_link] = ad.matmul(parent_rot, r_joint)
        poss[joint.child_link] = ad.add(
            poss[joint.parent_link], _rotate_vector(parent_rot, joint.origin[:3, 3])
        )
    return rots, poss


def transform_points_tape(rot_node, pos_node, points: np.ndarray):
    """Pose constant link-frame points with tape-valued rotation and translation."""
    pts = np.asarray(points, dtype=np.float64)
    rotated = ad.matmul(pts, ad.transpose(rot_node, (1, 0)))
    return ad.add(rotated, pos_node)
