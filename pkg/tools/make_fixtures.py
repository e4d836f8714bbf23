"""Generate the bundled hand and object fixtures.

Run from the repo root:

    python3 tools/make_fixtures.py

Writes validated hand description files under src/graspsynth/data/hands/,
object meshes and annotations under src/graspsynth/data/objects/, and the
category scale-range configuration. All geometry is authored here, not
taken from any datasheet; seeds are fixed so regeneration is byte-stable.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from graspsynth import transforms as tf
from graspsynth.affordance import load_object, object_axes
from graspsynth.geometry import (
    ConvexPrimitive,
    load_mesh,
    oriented_bounding_box,
    primitive_signed_distance,
    sample_surface_points,
    tessellate_primitive,
)
from graspsynth.hand import GraspConfiguration, forward_kinematics, load_hand

HANDS_DIR = ROOT / "src" / "graspsynth" / "data" / "hands"
OBJECTS_DIR = ROOT / "src" / "graspsynth" / "data" / "objects"
DATA_DIR = ROOT / "src" / "graspsynth" / "data"

# surface sample counts by link role
SAMPLES = {"palm": 144, "knuckle": 24, "meta": 24, "root": 24, "base": 36,
           "prox": 40, "mid": 32, "dist": 44}

RZ_M90 = [np.cos(-np.pi / 4), 0.0, 0.0, np.sin(-np.pi / 4)]  # quat for Rz(-90 deg)


def _r(x, nd=9):
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_r(v, nd) for v in np.asarray(x).tolist()]
    return round(float(x), nd)


def _prim_to_spec(kind, **kw):
    return {"type": kind, **{k: _r(v) for k, v in kw.items()}}


def _prim_from_spec(spec):
    if spec["type"] == "sphere":
        return ConvexPrimitive.sphere(spec["center"], spec["radius"])
    if spec["type"] == "capsule":
        return ConvexPrimitive.capsule(spec["p0"], spec["p1"], spec["radius"])
    rot = None
    if "rotation" in spec:
        rot = tf.quat_to_matrix(np.asarray(spec["rotation"], dtype=np.float64))
    return ConvexPrimitive.box(spec["center"], spec["half_extents"], rotation=rot)


def _link(name, part, role, prim_specs, seed):
    """Link dict with surface points sampled from the tessellated primitives."""
    prims = [_prim_from_spec(p) for p in prim_specs]
    meshes = [tessellate_primitive(p, resolution=10) for p in prims]
    areas = np.array([m.face_areas.sum() for m in meshes])
    total = SAMPLES[role]
    counts = np.maximum(1, np.round(total * areas / areas.sum()).astype(int))
    pts, nrm = [], []
    for i, mesh in enumerate(meshes):
        cloud = sample_surface_points(mesh, int(counts[i]), seed=seed + i)
        pts.append(cloud.points)
        nrm.append(cloud.normals)
    pts = np.vstack(pts)
    nrm = np.vstack(nrm)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return {
        "name": name,
        "part": part,
        "primitives": prim_specs,
        "surface_points": _r(pts),
        "surface_normals": _r(nrm),
    }


def _capsule_spec(y0, y1, radius):
    return _prim_to_spec("capsule", p0=[0.0, y0, 0.0], p1=[0.0, y1, 0.0], radius=radius)


def _finger(part, base_xy, scale, seed, extra_meta=False):
    """Standard finger chain: [meta ->] knuckle -> prox -> mid -> dist.

    Segments run along local +y and flex about local +x, curling toward
    the palm normal +z. Returns (links, joints, anchors held by the part).
    """
    s = scale
    links, joints = [], []
    kr, pr, mr, dr = 0.0085, 0.0080, 0.0075, 0.0070
    plen, mlen, dlen = 0.040 * s, 0.028 * s, 0.022 * s
    base = [base_xy[0], base_xy[1], 0.0]
    parent = "palm"
    if extra_meta:
        links.append(_link(f"{part}_meta", part, "meta",
                           [_capsule_spec(0.006, 0.016, 0.0075)], seed))
        joints.append({
            "name": f"{part}_meta", "parent": "palm", "child": f"{part}_meta",
            "axis": [1.0, 0.0, 0.0], "origin": {"translation": _r(base)},
            "limits": [0.0, 0.5], "flexion": True,
        })
        parent = f"{part}_meta"
        base = [0.0, 0.020, 0.0]
    links.append(_link(f"{part}_knuckle", part, "knuckle",
                       [_capsule_spec(0.008, 0.018, kr)], seed + 10))
    links.append(_link(f"{part}_prox", part, "prox", [_capsule_spec(0.0, plen, pr)], seed + 20))
    links.append(_link(f"{part}_mid", part, "mid", [_capsule_spec(0.0, mlen, mr)], seed + 30))
    links.append(_link(f"{part}_dist", part, "dist", [_capsule_spec(0.0, dlen, dr)], seed + 40))
    joints.extend([
        {"name": f"{part}_abd", "parent": parent, "child": f"{part}_knuckle",
         "axis": [0.0, 0.0, 1.0], "origin": {"translation": _r(base)},
         "limits": [-0.3, 0.3]},
        {"name": f"{part}_mcp", "parent": f"{part}_knuckle", "child": f"{part}_prox",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": [0.0, 0.022, 0.0]},
         "limits": [-0.15, 1.6], "flexion": True},
        {"name": f"{part}_pip", "parent": f"{part}_prox", "child": f"{part}_mid",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": _r([0.0, plen, 0.0])},
         "limits": [-0.1, 1.7], "flexion": True},
        {"name": f"{part}_dip", "parent": f"{part}_mid", "child": f"{part}_dist",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": _r([0.0, mlen, 0.0])},
         "limits": [-0.1, 1.6], "flexion": True},
    ])
    functional = [
        {"link": f"{part}_dist", "point": _r([0.0, 0.60 * dlen, 0.90 * dr])},
        {"link": f"{part}_dist", "point": _r([0.0, 0.85 * dlen, 0.80 * dr])},
        {"link": f"{part}_dist", "point": _r([0.0, dlen + 0.3 * dr, 0.55 * dr])},
    ]
    grasping = [
        {"link": f"{part}_prox", "point": _r([0.0, 0.5 * plen, pr])},
        {"link": f"{part}_mid", "point": _r([0.0, 0.5 * mlen, mr])},
    ]
    return links, joints, functional, grasping


def _thumb(base, seed, with_roll=False):
    """Thumb chain along world +x (local frame turned by Rz(-90 deg))."""
    links, joints = [], []
    parent = "palm"
    origin = {"translation": _r(base), "rotation": _r(RZ_M90)}
    if with_roll:
        links.append(_link("thumb_root", "thumb", "root",
                           [_prim_to_spec("sphere", center=[0.0, 0.006, 0.0], radius=0.009)],
                           seed))
        joints.append({
            "name": "thumb_roll", "parent": "palm", "child": "thumb_root",
            "axis": [0.0, 1.0, 0.0], "origin": origin, "limits": [-0.7, 0.7],
        })
        parent = "thumb_root"
        origin = {"translation": [0.0, 0.012, 0.0]}
    links.append(_link("thumb_base", "thumb", "base", [_capsule_spec(0.004, 0.022, 0.010)], seed + 10))
    links.append(_link("thumb_prox", "thumb", "prox", [_capsule_spec(0.0, 0.032, 0.0095)], seed + 20))
    links.append(_link("thumb_mid", "thumb", "mid", [_capsule_spec(0.0, 0.024, 0.0090)], seed + 30))
    links.append(_link("thumb_dist", "thumb", "dist", [_capsule_spec(0.0, 0.020, 0.0085)], seed + 40))
    joints.extend([
        {"name": "thumb_abd", "parent": parent, "child": "thumb_base",
         "axis": [0.0, 0.0, 1.0], "origin": origin, "limits": [-0.6, 0.6]},
        {"name": "thumb_mcp", "parent": "thumb_base", "child": "thumb_prox",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": [0.0, 0.026, 0.0]},
         "limits": [-0.2, 1.3], "flexion": True},
        {"name": "thumb_ip1", "parent": "thumb_prox", "child": "thumb_mid",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": [0.0, 0.032, 0.0]},
         "limits": [-0.2, 1.3], "flexion": True},
        {"name": "thumb_ip2", "parent": "thumb_mid", "child": "thumb_dist",
         "axis": [1.0, 0.0, 0.0], "origin": {"translation": [0.0, 0.024, 0.0]},
         "limits": [-0.2, 1.3], "flexion": True},
    ])
    dlen, dr = 0.020, 0.0085
    functional = [
        {"link": "thumb_dist", "point": _r([0.0, 0.60 * dlen, 0.90 * dr])},
        {"link": "thumb_dist", "point": _r([0.0, 0.85 * dlen, 0.80 * dr])},
        {"link": "thumb_dist", "point": _r([0.0, dlen + 0.3 * dr, 0.55 * dr])},
    ]
    grasping = [
        {"link": "thumb_base", "point": _r([0.0, 0.013, 0.010])},
        {"link": "thumb_prox", "point": _r([0.0, 0.016, 0.0095])},
    ]
    return links, joints, functional, grasping


def _palm_link(half_extents, seed):
    spec = _prim_to_spec("box", center=[0.0, -0.005, 0.0], half_extents=list(half_extents))
    return _link("palm", "palm", "palm", [spec], seed)


def _palm_grasp_anchors(z_top):
    pts = []
    for x in (-0.020, 0.020):
        for y in (-0.030, 0.0, 0.030):
            pts.append({"link": "palm", "point": _r([x, y, z_top])})
    return pts


def _finish_axes(doc, path):
    """Fill declared FA/GF axes so rest-frame axes are consistent.

    FA press directions are the palm normal orthogonalized against each
    finger's rest GF; the three thumb GF variants fan out in the plane
    orthogonal to the thumb press direction.
    """
    doc["axes"] = {"fa": {f: [0.0, 0.0, 1.0] for f in doc["anchors"]["functional"]}}
    if "thumb" in doc["anchors"]["functional"]:
        doc["axes"]["thumb_gf"] = [[1.0, 0.0, 0.0]] * 3
    path.write_text(json.dumps(doc))
    hand = load_hand(path)
    ident = GraspConfiguration.identity(hand)
    poses = forward_kinematics(hand, ident)
    center = hand.grasp_center
    fa = {}
    for finger, anchors in hand.functional_anchors.items():
        tip = np.mean(
            [tf.transform_points(poses[a.link], a.point) for a in anchors], axis=0
        )
        gf = tip - center
        gf /= np.linalg.norm(gf)
        if finger == "thumb":
            # press direction first, then three GF variants orthogonal to it
            raw = np.array([-0.20, -0.30, 0.93])
            press = raw / np.linalg.norm(raw)
            g0 = gf - (gf @ press) * press
            g0 /= np.linalg.norm(g0)
            side = np.cross(press, g0)
            variants = [g0]
            for ang in (0.6, -0.6):
                v = np.cos(ang) * g0 + np.sin(ang) * side
                variants.append(v / np.linalg.norm(v))
            doc["axes"]["thumb_gf"] = _r(np.stack(variants))
            fa[finger] = _r(press)
        else:
            raw = np.array([0.0, 0.0, 1.0])
            press = raw - (raw @ gf) * gf
            press /= np.linalg.norm(press)
            fa[finger] = _r(press)
    doc["axes"]["fa"] = fa
    return doc


def _clearance(hand, config):
    """Smallest inter-part signed distance: surface points vs primitives."""
    poses = forward_kinematics(hand, config)
    groups = hand.part_links()
    world = {}
    for part, idxs in groups.items():
        world[part] = np.vstack(
            [tf.transform_points(poses[i], hand.links[i].surface_points.points) for i in idxs]
        )
    worst = np.inf
    for part_a, idxs in groups.items():
        others = np.vstack([w for p, w in world.items() if p != part_a])
        for i in idxs:
            inv = tf.transform_inverse(poses[i])
            local = tf.transform_points(inv, others)
            for prim in hand.links[i].primitives:
                worst = min(worst, float(primitive_signed_distance(prim, local).min()))
    return worst


def build_fourfinger16(path):
    links = [_palm_link((0.040, 0.048, 0.011), seed=100)]
    joints, functional, grasping = [], {}, _palm_grasp_anchors(0.011)
    for i, (part, x, scale) in enumerate(
        [("index", 0.028, 1.0), ("middle", 0.0, 1.06), ("ring", -0.028, 0.96)]
    ):
        l, j, fn, gr = _finger(part, (x, 0.046), scale, seed=200 + 100 * i)
        links += l
        joints += j
        functional[part] = fn
        grasping += gr
    l, j, fn, gr = _thumb([0.052, -0.010, 0.004], seed=600)
    links += l
    joints += j
    functional["thumb"] = fn
    grasping += gr
    doc = {
        "name": "fourfinger16",
        "links": links,
        "joints": joints,
        "anchors": {"functional": functional, "grasping": grasping},
    }
    doc = _finish_axes(doc, path)
    path.write_text(json.dumps(doc))
    return doc


def build_fivefinger22(path):
    links = [_palm_link((0.042, 0.050, 0.011), seed=1100)]
    joints, functional, grasping = [], {}, _palm_grasp_anchors(0.011)
    for i, (part, x, scale, meta) in enumerate([
        ("index", 0.032, 1.0, False),
        ("middle", 0.011, 1.08, False),
        ("ring", -0.011, 0.98, False),
        ("little", -0.033, 0.82, True),
    ]):
        l, j, fn, gr = _finger(part, (x, 0.048), scale, seed=1200 + 100 * i, extra_meta=meta)
        links += l
        joints += j
        functional[part] = fn
        grasping += gr
    l, j, fn, gr = _thumb([0.054, -0.008, 0.004], seed=1700, with_roll=True)
    links += l
    joints += j
    functional["thumb"] = fn
    grasping += gr
    doc = {
        "name": "fivefinger22",
        "links": links,
        "joints": joints,
        "anchors": {"functional": functional, "grasping": grasping},
        "grasp_center": [0.004, 0.012, 0.030],
    }
    doc = _finish_axes(doc, path)
    path.write_text(json.dumps(doc))
    return doc


# ---------------------------------------------------------------- objects


def _cylinder_mesh(radius, z0, z1, n=48):
    """Closed cylinder about +z with outward-facing triangles."""
    theta = 2 * np.pi * np.arange(n) / n
    ring = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    bottom = np.hstack([ring, np.full((n, 1), z0)])
    top = np.hstack([ring, np.full((n, 1), z1)])
    verts = np.vstack([bottom, top, [[0, 0, z0]], [[0, 0, z1]]])
    c0, c1 = 2 * n, 2 * n + 1
    faces = []
    for j in range(n):
        k = (j + 1) % n
        faces.append([j, k, n + k])
        faces.append([j, n + k, n + j])
        faces.append([c0, k, j])
        faces.append([c1, n + j, n + k])
    return verts, np.array(faces)


def _merge(parts):
    verts, faces, offset = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(np.asarray(f) + offset)
        offset += len(v)
    return np.vstack(verts), np.vstack(faces)


def _write_obj(path, verts, faces):
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}" for v in verts]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in faces]
    path.write_text("\n".join(lines) + "\n")


def _box_part(center, half):
    mesh = tessellate_primitive(ConvexPrimitive.box(center, half))
    return mesh.vertices, mesh.faces


def _annotate(mesh_path, seed, select_functional, select_grasping):
    mesh = load_mesh(mesh_path)
    cloud = sample_surface_points(mesh, 2048, seed=seed)
    functional = np.flatnonzero(select_functional(cloud.points, cloud.normals))
    grasping = np.flatnonzero(select_grasping(cloud.points, cloud.normals))
    native = float(oriented_bounding_box(cloud.points).max_extent)
    return cloud, functional, grasping, round(native, 6)


def build_cylinder(name="cylinder"):
    """Plain cylinder: grasping band on the lower shaft, functional side
    patch near the top facing +x."""
    verts, faces = _cylinder_mesh(0.030, -0.12, 0.12)
    mesh_path = OBJECTS_DIR / f"{name}.obj"
    _write_obj(mesh_path, verts, faces)

    def functional(pts, nrm):
        return (pts[:, 2] > 0.055) & (pts[:, 2] < 0.105) & (nrm[:, 0] > 0.88)

    def grasping(pts, nrm):
        side = np.abs(nrm[:, 2]) < 0.5
        return side & (pts[:, 2] > -0.10) & (pts[:, 2] < -0.01)

    cloud, fn, gr, native = _annotate(mesh_path, 71, functional, grasping)
    note = {
        "category": "cylinder",
        "seed": 71,
        "n_points": 2048,
        "native_scale": native,
        "functional_indices": fn.tolist(),
        "grasping_indices": gr.tolist(),
    }
    (OBJECTS_DIR / f"{name}.json").write_text(json.dumps(note))
    return len(fn), len(gr)


def build_spray_bottle(name="spray_bottle"):
    """Bottle body with neck, head, and a front trigger facing +x."""
    parts = [
        _cylinder_mesh(0.036, 0.0, 0.150),
        _cylinder_mesh(0.018, 0.148, 0.195, n=32),
        _box_part([0.010, 0.0, 0.213], [0.034, 0.015, 0.020]),
        _box_part([0.040, 0.0, 0.174], [0.005, 0.015, 0.030]),
    ]
    verts, faces = _merge(parts)
    mesh_path = OBJECTS_DIR / f"{name}.obj"
    _write_obj(mesh_path, verts, faces)

    def functional(pts, nrm):
        # front face of the trigger; z window excludes the body and head
        return (nrm[:, 0] > 0.99) & (pts[:, 0] > 0.030) & (pts[:, 2] > 0.140) & (pts[:, 2] < 0.192)

    def grasping(pts, nrm):
        side = np.abs(nrm[:, 2]) < 0.5
        radial = np.linalg.norm(pts[:, :2], axis=1)
        return side & (radial > 0.030) & (pts[:, 2] > 0.02) & (pts[:, 2] < 0.13)

    cloud, fn, gr, native = _annotate(mesh_path, 72, functional, grasping)
    note = {
        "category": "spray_bottle",
        "seed": 72,
        "n_points": 2048,
        "native_scale": native,
        "functional_indices": fn.tolist(),
        "grasping_indices": gr.tolist(),
    }
    (OBJECTS_DIR / f"{name}.json").write_text(json.dumps(note))
    return len(fn), len(gr)


def build_objects():
    OBJECTS_DIR.mkdir(parents=True, exist_ok=True)
    for name, builder in [("cylinder", build_cylinder), ("spray_bottle", build_spray_bottle)]:
        n_fn, n_gr = builder(name)
        obj = load_object(*[OBJECTS_DIR / f"{name}{ext}" for ext in (".obj", ".json")])
        axes = object_axes(obj)
        print(
            f"{name}: scale {obj.scale:.4f} m, functional {n_fn} pts, grasping {n_gr} pts, "
            f"gf {np.round(axes.gf, 3).tolist()}, fa {np.round(axes.fa, 3).tolist()}"
        )
        if n_fn < 30 or n_gr < 150:
            raise SystemExit(f"{name}: annotated parts too sparse")


def write_scale_ranges():
    ranges = {"cylinder": [0.12, 0.26], "spray_bottle": [0.16, 0.30]}
    (DATA_DIR / "scale_ranges.json").write_text(json.dumps(ranges, indent=2) + "\n")
    print(f"scale_ranges: {ranges}")


def main():
    HANDS_DIR.mkdir(parents=True, exist_ok=True)
    for name, builder in [("fourfinger16", build_fourfinger16), ("fivefinger22", build_fivefinger22)]:
        path = HANDS_DIR / f"{name}.json"
        builder(path)
        hand = load_hand(path)
        rest = _clearance(hand, GraspConfiguration.identity(hand))
        flexed = np.zeros(hand.dof)
        flexed[hand.flexion_joints()] = 0.2
        curl = _clearance(
            hand, GraspConfiguration(np.zeros(3), np.array([1.0, 0, 0, 0]), flexed)
        )
        n_pts = sum(len(l.surface_points) for l in hand.links)
        print(
            f"{name}: {hand.dof} joints, {len(hand.links)} links, {n_pts} surface points, "
            f"clearance rest {rest * 1000:.2f} mm / flexed {curl * 1000:.2f} mm"
        )
        if rest < 5e-4 or curl < 0.0:
            raise SystemExit(f"{name}: links too close at rest or flexed pose")
    build_objects()
    write_scale_ranges()


if __name__ == "__main__":
    main()
