import numpy as np
import pytest

from graspsynth import geometry as geo
from graspsynth import transforms as tf

from util import random_rotation, ray_parity_inside


def unit_cube() -> geo.TriangleMesh:
    return geo.tessellate_primitive(
        geo.ConvexPrimitive.box(np.zeros(3), np.array([0.5, 0.5, 0.5]))
    )


# ---------------------------------------------------------------- chamfer


def test_chamfer_identity():
    p = np.array([[0.0, 0, 0], [1, 1, 1]])
    assert geo.chamfer_distance(p, p) == 0.0


def test_chamfer_hand_value_half():
    p = np.array([[0.0, 0, 0]])
    q = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    assert abs(geo.chamfer_distance(p, q) - 0.5) < 1e-9


def test_chamfer_hand_value_fifty():
    p = np.array([[0.0, 0, 0]])
    q = np.array([[0.0, 3, 4]])
    assert abs(geo.chamfer_distance(p, q) - 50.0) < 1e-9


def test_chamfer_symmetric_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.normal(size=(rng.integers(1, 40), 3))
        q = rng.normal(size=(rng.integers(1, 40), 3))
        d_pq = geo.chamfer_distance(p, q)
        d_qp = geo.chamfer_distance(q, p)
        assert d_pq >= 0
        assert abs(d_pq - d_qp) < 1e-12


def test_chamfer_quadratic_scaling():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(30, 3))
    q = rng.normal(size=(25, 3))
    base = geo.chamfer_distance(p, q)
    for s in [0.5, 2.0, 3.7]:
        assert abs(geo.chamfer_distance(s * p, s * q) - s * s * base) < 1e-9 * max(1, s * s)


def test_chamfer_kdtree_path_matches_brute():
    rng = np.random.default_rng(2)
    p = rng.normal(size=(700, 3))
    q = rng.normal(size=(800, 3))  # 700*800 pairs > brute limit
    big = geo.chamfer_distance(p, q)
    d1 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    brute = d1.min(axis=1).mean() + d1.min(axis=0).mean()
    assert abs(big - brute) < 1e-10


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        geo.chamfer_distance(np.zeros((0, 3)), np.zeros((1, 3)))


# ---------------------------------------------------------------- primitives


def test_sphere_sdf_exact():
    prim = geo.ConvexPrimitive.sphere(np.zeros(3), 1.0)
    assert abs(geo.primitive_signed_distance(prim, np.zeros(3)) + 1.0) < 1e-12
    assert abs(geo.primitive_signed_distance(prim, np.array([2.0, 0, 0])) - 1.0) < 1e-12
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3)) * 2
    got = geo.primitive_signed_distance(prim, pts)
    want = np.linalg.norm(pts, axis=1) - 1.0
    assert np.allclose(got, want, atol=1e-12)


def test_capsule_sdf_example():
    prim = geo.ConvexPrimitive.capsule([0, 0, 0], [0, 0, 1], 0.1)
    got = geo.primitive_signed_distance(prim, np.array([0.3, 0.0, 0.5]))
    assert abs(got - 0.2) < 1e-12


def test_box_sdf_inside_outside():
    prim = geo.ConvexPrimitive.box(np.zeros(3), np.array([0.5, 0.5, 0.5]))
    assert abs(geo.primitive_signed_distance(prim, np.zeros(3)) + 0.5) < 1e-12
    assert abs(geo.primitive_signed_distance(prim, np.array([1.5, 0, 0])) - 1.0) < 1e-12
    # corner region: distance to nearest corner
    p = np.array([1.0, 1.0, 1.0])
    want = np.linalg.norm(p - [0.5, 0.5, 0.5])
    assert abs(geo.primitive_signed_distance(prim, p) - want) < 1e-12


def test_primitive_gradient_matches_fd():
    rng = np.random.default_rng(4)
    prims = [
        geo.ConvexPrimitive.sphere([0.1, -0.2, 0.05], 0.3),
        geo.ConvexPrimitive.capsule([-0.1, 0, 0], [0.2, 0.1, 0.3], 0.15),
        geo.ConvexPrimitive.box([0.0, 0.1, 0.0], [0.2, 0.3, 0.1]),
    ]
    h = 1e-6
    checked = 0
    for prim in prims:
        for _ in range(40):
            p = rng.normal(size=3) * 0.5
            d0 = geo.primitive_signed_distance(prim, p)
            if abs(d0) < 1e-3:  # skip surface kink neighborhood
                continue
            grad = np.zeros(3)
            for k in range(3):
                dp = p.copy()
                dp[k] += h
                dm = p.copy()
                dm[k] -= h
                grad[k] = (
                    geo.primitive_signed_distance(prim, dp)
                    - geo.primitive_signed_distance(prim, dm)
                ) / (2 * h)
            # SDF gradients are unit where smooth; checks the eikonal property
            if abs(np.linalg.norm(grad) - 1.0) < 1e-4:
                checked += 1
    assert checked > 60


def test_primitive_validation():
    with pytest.raises(ValueError):
        geo.ConvexPrimitive.sphere(np.zeros(3), -1.0)
    with pytest.raises(ValueError):
        geo.ConvexPrimitive("box", np.eye(4), half_extents=[0.1, 0.0, 0.1])
    with pytest.raises(ValueError):
        geo.ConvexPrimitive("torus", np.eye(4))


# ---------------------------------------------------------------- OBB


def test_obb_box_of_box():
    corners = np.array([
        [x, y, z]
        for x in (-0.05, 0.05)
        for y in (-0.1, 0.1)
        for z in (-0.15, 0.15)
    ])
    rng = np.random.default_rng(5)
    jitter = corners + rng.normal(size=corners.shape) * 1e-9
    obb = geo.oriented_bounding_box(jitter)
    assert np.allclose(np.sort(obb.half_extents), [0.05, 0.1, 0.15], atol=1e-6)
    assert obb.contains(jitter)


def test_obb_single_point():
    obb = geo.oriented_bounding_box(np.tile([[1.0, 2.0, 3.0]], (5, 1)))
    assert np.allclose(obb.half_extents, 0.0, atol=1e-9)
    assert np.allclose(obb.center, [1, 2, 3], atol=1e-9)


def test_obb_rotation_invariant_extents():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(200, 3)) * np.array([0.02, 0.05, 0.11])
    base = np.sort(geo.oriented_bounding_box(pts).half_extents)
    for seed in range(5):
        r = random_rotation(np.random.default_rng(seed))
        got = np.sort(geo.oriented_bounding_box(pts @ r.T).half_extents)
        assert np.allclose(got, base, atol=1e-6)
        assert geo.oriented_bounding_box(pts @ r.T).contains(pts @ r.T)


def test_obb_axes_orthonormal():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(50, 3))
    obb = geo.oriented_bounding_box(pts)
    assert np.allclose(obb.axes.T @ obb.axes, np.eye(3), atol=1e-9)


def test_obb_empty_rejected():
    with pytest.raises(ValueError):
        geo.oriented_bounding_box(np.zeros((0, 3)))


# ---------------------------------------------------------------- mesh SDF


def test_cube_sdf_examples():
    cube = unit_cube()
    d = geo.mesh_signed_distance(cube, np.array([[0.0, 0, 0], [1.5, 0, 0]]))
    assert abs(d[0] + 0.5) < 1e-9
    assert abs(d[1] - 1.0) < 1e-9
    # exactly on a vertex
    d = geo.mesh_signed_distance(cube, np.array([0.5, 0.5, 0.5]))
    assert abs(d) < 1e-9


def test_sdf_sign_matches_ray_parity():
    rng = np.random.default_rng(8)
    cube = unit_cube()
    cyl = geo.tessellate_primitive(
        geo.ConvexPrimitive.capsule([0, 0, -0.3], [0, 0, 0.3], 0.2), resolution=10
    )
    total = 0
    for mesh in (cube, cyl):
        pts = rng.uniform(-0.9, 0.9, size=(500, 3))
        sdf = geo.mesh_signed_distance(mesh, pts)
        for p, d in zip(pts, sdf):
            if abs(d) < 1e-6:
                continue  # on-surface points have no parity
            want = ray_parity_inside(mesh.vertices, mesh.faces, p, rng)
            assert (d < 0) == want
            total += 1
    assert total >= 990


def test_nearest_surface_point_face():
    cube = unit_cube()
    got = geo.nearest_surface_point(cube, np.array([2.0, 0.0, 0.0]))
    assert np.allclose(got.point, [0.5, 0.0, 0.0], atol=1e-9)
    assert np.allclose(got.normal, [1.0, 0.0, 0.0], atol=1e-9)


def test_nearest_surface_point_on_surface():
    cube = unit_cube()
    p = np.array([0.5, 0.12, -0.2])
    got = geo.nearest_surface_point(cube, p)
    assert np.allclose(got.point, p, atol=1e-9)


def test_nearest_surface_point_center_distance():
    cube = unit_cube()
    got = geo.nearest_surface_point(cube, np.zeros(3))
    assert abs(np.linalg.norm(got.point) - 0.5) < 1e-9


def test_nearest_outward_pseudonormals():
    cube = unit_cube()
    rng = np.random.default_rng(9)
    for _ in range(50):
        p = rng.normal(size=3)
        p = p / np.linalg.norm(p) * 2.0
        got = geo.nearest_surface_point(cube, p)
        # outward normal points from surface toward the outside query
        assert (p - got.point) @ got.normal > 0


def test_bvh_matches_brute_force():
    rng = np.random.default_rng(10)
    mesh = geo.tessellate_primitive(
        geo.ConvexPrimitive.capsule([0, 0, -0.2], [0.1, 0, 0.2], 0.15), resolution=12
    )
    pts = rng.uniform(-0.6, 0.6, size=(100, 3))
    a, b, c = mesh.tri_corners
    for p in pts:
        d2, point, fid, _ = mesh.bvh.query(p)
        from graspsynth.geometry.bvh import closest_point_on_triangles

        cp, _ = closest_point_on_triangles(p, a, b, c)
        brute = np.sum((cp - p) ** 2, axis=1).min()
        assert abs(d2 - brute) < 1e-12


def test_degenerate_triangles_dropped():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [1, 1, 2], [1, 3, 2]])
    mesh = geo.TriangleMesh(verts, faces)
    assert mesh.n_degenerate_dropped == 1
    assert len(mesh.faces) == 2


# ---------------------------------------------------------------- sampling


def test_sample_surface_planar():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = geo.TriangleMesh(verts, faces)
    cloud = geo.sample_surface_points(mesh, 1000, seed=0)
    assert np.all(np.abs(cloud.points[:, 2]) < 1e-9)
    assert len(cloud) == 1000
    assert cloud.normals is not None


def test_sample_determinism():
    mesh = unit_cube()
    c1 = geo.sample_surface_points(mesh, 256, seed=42)
    c2 = geo.sample_surface_points(mesh, 256, seed=42)
    assert np.array_equal(c1.points, c2.points)
    c3 = geo.sample_surface_points(mesh, 256, seed=43)
    assert not np.array_equal(c1.points, c3.points)


def test_sample_area_weighting():
    # two triangles, areas 4.5 and 0.5 (ratio 9:1)
    verts = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [-1, 0, 0], [0, -1, 0]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 3, 4]])
    mesh = geo.TriangleMesh(verts, faces)
    cloud, fidx = geo.sample_surface_points(mesh, 4000, seed=1, return_faces=True)
    n_big = int((fidx == 0).sum())
    p = 0.9
    sigma = np.sqrt(4000 * p * (1 - p))
    assert abs(n_big - 4000 * p) < 3 * sigma


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        geo.PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        geo.PointCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))  # not unit
    cloud = geo.PointCloud(np.zeros((2, 3)), normals=np.array([[1, 0, 0], [0, 1, 0.0]]))
    assert len(cloud) == 2


# ---------------------------------------------------------------- mesh IO


def test_obj_roundtrip(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text(
        "# comment\n"
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "f 1 2 3 4\n"
    )
    mesh = geo.load_mesh(path)
    assert len(mesh.vertices) == 4
    assert len(mesh.faces) == 2  # fan triangulated


def test_obj_slash_and_negative_indices(tmp_path):
    path = tmp_path / "t.obj"
    path.write_text(
        "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
        "f 1/1/1 2/2/2 3/3/3\n"
        "f -3 -2 -1\n"
    )
    mesh = geo.load_mesh(path)
    assert len(mesh.faces) == 2


def test_ply_ascii_and_binary_roundtrip(tmp_path):
    cube = unit_cube()
    for binary in (True, False):
        path = tmp_path / f"cube_{binary}.ply"
        geo.save_ply(path, cube.vertices, cube.faces, binary=binary)
        back = geo.load_mesh(path)
        assert np.allclose(back.vertices, cube.vertices, atol=1e-6)
        assert np.array_equal(back.faces, cube.faces)


def test_ply_colors_roundtrip(tmp_path):
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=np.float64)
    colors = np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255]], dtype=np.uint8)
    path = tmp_path / "colored.ply"
    geo.save_ply(path, verts, faces=[[0, 1, 2]], colors=colors)
    text = path.read_bytes()
    assert b"property uchar red" in text
    mesh = geo.load_mesh(path)
    assert len(mesh.vertices) == 3


def test_load_mesh_unknown_format(tmp_path):
    path = tmp_path / "thing.stl"
    path.write_text("")
    with pytest.raises(ValueError):
        geo.load_mesh(path)
