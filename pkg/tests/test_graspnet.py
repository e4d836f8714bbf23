import math

import numpy as np
import pytest

from graspsynth import autodiff as ad
from graspsynth import graspnet as gn
from graspsynth import transforms as tf
from graspsynth.affordance import bundled_object_paths, load_object
from graspsynth.geometry.pointcloud import chamfer_distance
from graspsynth.hand import (
    GraspConfiguration,
    bundled_hand_path,
    hand_surface_points,
    load_hand,
)
from graspsynth.quality import GraspMetrics
from graspsynth.records import GraspRecord

from util import rel_err


@pytest.fixture(scope="module")
def four():
    return load_hand(bundled_hand_path("fourfinger16"))


@pytest.fixture(scope="module")
def cylinder():
    return load_object(*bundled_object_paths("cylinder"))


def tiny_model(hand, seed=0, n_points=32):
    return gn.build_model(
        hand, n_z=4, point_widths=(8, 16), embed_width=16, encoder_widths=(16, 16),
        decoder_widths=(16, 16), n_points=n_points, seed=seed,
    )


def randomize(model, seed=1, scale=0.05):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value += rng.normal(scale=scale, size=p.value.shape)


def random_config(hand, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    limits = hand.limits_array()
    theta = limits[:, 0] + (limits[:, 1] - limits[:, 0]) * rng.uniform(
        0.2, 0.8, hand.dof
    )
    return GraspConfiguration(rng.normal(size=3) * 0.1, q, theta)


def bounded_config(hand, seed):
    # rotation within ~35 deg of identity; chamfer has antipodal local
    # minima, so an overfit target must sit in the decoder's init basin
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    q = tf.quat_from_rotvec(axis * rng.uniform(0.2, 0.6))
    limits = hand.limits_array()
    theta = limits[:, 0] + (limits[:, 1] - limits[:, 0]) * rng.uniform(
        0.2, 0.8, hand.dof
    )
    return GraspConfiguration(rng.normal(size=3) * 0.1, q, theta)


def make_record(hand, cylinder, i):
    met = GraspMetrics(0.01, 0.001, 0.0, 0.0, True)
    return GraspRecord(
        "cylinder", "cylinder", cylinder.scale, hand.name, random_config(hand, i),
        met, (0.1, 0.1, 1.0, 0.0, 0.0), i, "synthesized",
    )


# ---------------------------------------------------------------- dataclasses


def test_latent_distribution_validation():
    d = gn.LatentDistribution([0.0, 1.0], [1.0, 2.0])
    assert d.mu.shape == (2,)
    with pytest.raises(ValueError):
        gn.LatentDistribution([0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        gn.LatentDistribution([0.0], [0.0])
    with pytest.raises(ValueError):
        gn.LatentDistribution([0.0], [-1.0])


def test_train_settings_validation():
    s = gn.TrainSettings()
    assert s.beta == 1e-3 and s.n_z == 32 and s.n_points == 512
    for bad in (
        dict(epochs=0),
        dict(batch_size=0),
        dict(step_size=0.0),
        dict(beta=-1e-9),
        dict(n_z=0),
        dict(n_points=0),
    ):
        with pytest.raises(ValueError):
            gn.TrainSettings(**bad)


# ---------------------------------------------------------------- conditioning


def test_object_features_shape_and_determinism(cylinder):
    a = gn.object_features(cylinder, 512)
    b = gn.object_features(cylinder, 512)
    assert a.shape == (512, 6)
    assert np.array_equal(a, b)


def test_object_features_passthrough_when_count_matches(cylinder):
    n = cylinder.surface.points.shape[0]
    feats = gn.object_features(cylinder, n)
    assert np.array_equal(feats[:, :3], cylinder.surface.points)
    assert np.array_equal(feats[:, 3:], cylinder.surface.normals)


def test_object_features_upsamples_small_clouds(cylinder):
    feats = gn.object_features(cylinder, 4096)
    assert feats.shape == (4096, 6)


def test_object_features_extra_channels(cylinder):
    n = cylinder.surface.points.shape[0]
    extra = np.arange(n, dtype=np.float64).reshape(-1, 1)
    feats = gn.object_features(cylinder, 512, extra)
    assert feats.shape == (512, 7)
    with pytest.raises(ValueError):
        gn.object_features(cylinder, 512, np.zeros((3, 1)))


# ---------------------------------------------------------------- encode


def test_encode_zero_init_reports_prior(four, cylinder):
    model = tiny_model(four)
    feats = gn.object_features(cylinder, 32)
    dist = gn.encode(model, feats, GraspConfiguration.identity(four))
    assert np.all(dist.mu == 0.0)
    assert np.all(dist.sigma == 1.0)


def test_encode_permutation_invariant(four, cylinder):
    model = tiny_model(four)
    randomize(model)
    feats = gn.object_features(cylinder, 32)
    cfg = random_config(four, 3)
    base = gn.encode(model, feats, cfg)
    rng = np.random.default_rng(0)
    for _ in range(3):
        perm = rng.permutation(32)
        moved = gn.encode(model, feats[perm], cfg)
        assert np.abs(moved.mu - base.mu).max() < 1e-6
        assert np.abs(moved.sigma - base.sigma).max() < 1e-6


def test_encode_separates_distinct_grasps(four, cylinder):
    model = tiny_model(four)
    randomize(model)
    feats = gn.object_features(cylinder, 32)
    a = gn.encode(model, feats, random_config(four, 1))
    b = gn.encode(model, feats, random_config(four, 2))
    assert np.abs(a.mu - b.mu).max() > 1e-8


def test_encode_rejects_dimension_mismatch(four, cylinder):
    model = tiny_model(four)
    feats = gn.object_features(cylinder, 32)
    with pytest.raises(ValueError):
        gn.encode(model, feats[:16], GraspConfiguration.identity(four))
    with pytest.raises(ValueError):
        gn.encode(model, feats[:, :5], GraspConfiguration.identity(four))
    bad = GraspConfiguration(np.zeros(3), np.array([1.0, 0, 0, 0]), np.zeros(3))
    with pytest.raises(ValueError):
        gn.encode(model, feats, bad)


# ---------------------------------------------------------------- latent ops


def test_reparameterize_identities():
    dist = gn.LatentDistribution([1.0, -2.0], [3.0, 4.0])
    assert np.array_equal(gn.reparameterize(dist, np.zeros(2)), dist.mu)
    prior = gn.LatentDistribution(np.zeros(3), np.ones(3))
    n = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(gn.reparameterize(prior, n), n)


def test_reparameterize_floors_sigma():
    dist = gn.LatentDistribution([1.0], [1e-300])
    z = gn.reparameterize(dist, np.array([1.0]))
    assert z[0] == 1.0 + 1e-6


def test_reparameterize_rejects_bad_noise():
    dist = gn.LatentDistribution([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        gn.reparameterize(dist, np.zeros(3))


# ---------------------------------------------------------------- decode


def test_decode_rotation_is_orthonormal(four, cylinder):
    model = tiny_model(four)
    randomize(model)
    emb = gn.object_embedding(model, gn.object_features(cylinder, 32))
    rng = np.random.default_rng(4)
    for _ in range(10):
        cfg = gn.decode(model, rng.normal(size=4), emb)
        rot = tf.quat_to_matrix(cfg.rotation)
        assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-5
        assert np.linalg.det(rot) > 0


def test_decode_joints_within_limits(four, cylinder):
    model = tiny_model(four)
    randomize(model, scale=0.5)  # strong weights push the squash to its rails
    emb = gn.object_embedding(model, gn.object_features(cylinder, 32))
    limits = four.limits_array()
    rng = np.random.default_rng(5)
    for _ in range(20):
        cfg = gn.decode(model, rng.normal(size=4) * 3, emb)
        assert np.all(cfg.joint_angles >= limits[:, 0])
        assert np.all(cfg.joint_angles <= limits[:, 1])


def test_decode_deterministic(four, cylinder):
    model = tiny_model(four)
    randomize(model)
    emb = gn.object_embedding(model, gn.object_features(cylinder, 32))
    z = np.random.default_rng(6).normal(size=4)
    a = gn.decode(model, z, emb)
    b = gn.decode(model, z, emb)
    assert np.array_equal(a.translation, b.translation)
    assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(a.joint_angles, b.joint_angles)


def test_decode_rejects_bad_shapes(four, cylinder):
    model = tiny_model(four)
    emb = gn.object_embedding(model, gn.object_features(cylinder, 32))
    with pytest.raises(ValueError):
        gn.decode(model, np.zeros(5), emb)
    with pytest.raises(ValueError):
        gn.decode(model, np.zeros(4), emb[:-1])


# ---------------------------------------------------------------- losses


def test_loss_rec_zero_at_identity(four):
    cfg = random_config(four, 7)
    assert gn.loss_rec(cfg, cfg, four) == 0.0


def test_loss_rec_quadratic_in_small_shift(four):
    # well below the cloud's minimum point spacing, nearest neighbors stay
    # fixed and the chamfer value is exactly 2|v|^2
    cfg = GraspConfiguration.identity(four)
    v = np.array([1e-6, 0, 0])
    shifted = GraspConfiguration(cfg.translation + v, cfg.rotation, cfg.joint_angles)
    got = gn.loss_rec(shifted, cfg, four)
    assert rel_err(got, 2e-12) < 1e-9
    shifted2 = GraspConfiguration(
        cfg.translation + 2 * v, cfg.rotation, cfg.joint_angles
    )
    assert rel_err(gn.loss_rec(shifted2, cfg, four), 8e-12) < 1e-9


def test_loss_rec_matches_chamfer_oracle(four):
    a = random_config(four, 8)
    b = random_config(four, 9)
    want = chamfer_distance(
        hand_surface_points(four, a).points, hand_surface_points(four, b).points
    )
    assert gn.loss_rec(a, b, four) == want


def test_loss_kld_pinned_values():
    assert gn.loss_kld(gn.LatentDistribution(np.zeros(5), np.ones(5))) == 0.0
    assert abs(gn.loss_kld(gn.LatentDistribution([1.0], [1.0])) - 0.5) < 1e-12
    want = 0.5 * (4.0 - math.log(4.0) - 1.0)
    assert abs(gn.loss_kld(gn.LatentDistribution([0.0], [2.0])) - want) < 1e-12
    assert abs(want - 0.8069) < 1e-4


def test_loss_kld_nonnegative():
    rng = np.random.default_rng(10)
    for _ in range(20):
        dist = gn.LatentDistribution(
            rng.normal(size=6), np.exp(rng.normal(size=6) * 0.5)
        )
        assert gn.loss_kld(dist) >= 0.0
        if np.abs(dist.mu).max() > 1e-3:
            assert gn.loss_kld(dist) > 0.0


# ---------------------------------------------------------------- gradients


def test_decoder_gradient_matches_fd(four, cylinder):
    model = tiny_model(four)
    randomize(model, seed=2, scale=0.05)
    feats = gn.object_features(cylinder, 32)
    emb = gn.object_embedding(model, feats).reshape(1, -1)
    z = np.random.default_rng(11).normal(size=(1, 4))
    target = hand_surface_points(four, random_config(four, 12)).points
    groups = gn._surface_groups(four)

    def loss_value():
        t, rot, joints = gn._decode_nodes(model, z, emb)
        return gn._loss_rec_node(four, groups, t, rot, joints, target)

    grads = ad.backward(loss_value())
    rng = np.random.default_rng(13)
    h = 1e-6
    ad_vals, fd_vals = [], []
    for p in model.decoder_weights:
        g = grads.get(id(p))
        assert g is not None and g.shape == p.value.shape
        flat = p.value.reshape(-1)
        for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            keep = flat[idx]
            flat[idx] = keep + h
            up = float(ad.val(loss_value()))
            flat[idx] = keep - h
            down = float(ad.val(loss_value()))
            flat[idx] = keep
            fd_vals.append((up - down) / (2 * h))
            ad_vals.append(g.reshape(-1)[idx])
    assert rel_err(np.array(ad_vals), np.array(fd_vals)) < 1e-3


def test_beta_scales_kld_gradient_linearly(four, cylinder):
    model = tiny_model(four)
    randomize(model, seed=3)
    feats = gn.object_features(cylinder, 32)
    vec = gn._grasp_vector(random_config(four, 14))
    head_w = model.encoder_weights[-2]  # log-sigma head weight

    def grads_at(beta):
        embed = gn._embed_node(model.point_encoder, feats)
        mu, ls = gn._encode_nodes(model, embed, vec)
        rec = ad.asum(ad.square(mu))  # stand-in reconstruction path
        kld = gn._kld_node(mu, ls)
        loss = ad.add(rec, ad.mul(kld, beta)) if beta > 0 else rec
        return ad.backward(loss)

    g0 = grads_at(0.0).get(id(head_w))
    g1 = grads_at(1.0).get(id(head_w))
    g2 = grads_at(2.0).get(id(head_w))
    assert g0 is None  # beta = 0 leaves the KLD path out of the graph
    assert g1 is not None and np.abs(g1).max() > 0
    assert rel_err(g2, 2.0 * g1) < 1e-9


# ---------------------------------------------------------------- training


def test_train_rejects_empty_and_mixed(four, cylinder):
    with pytest.raises(ValueError):
        gn.train([], four, {"cylinder": cylinder})
    recs = [make_record(four, cylinder, 0)]
    alien = GraspRecord(
        "cylinder", "cylinder", cylinder.scale, "fivefinger22",
        recs[0].config, recs[0].metrics, recs[0].loss_terms, 1, "synthesized",
    )
    with pytest.raises(ValueError, match="mixes hands"):
        gn.train(recs + [alien], four, {"cylinder": cylinder})


def test_train_rejects_missing_geometry(four, cylinder):
    recs = [make_record(four, cylinder, 0)]
    with pytest.raises(ValueError, match="no geometry"):
        gn.train(recs, four, {})


def quick_settings(epochs=3):
    return gn.TrainSettings(
        epochs=epochs, batch_size=2, step_size=1e-3, beta=1e-3, seed=5, n_z=4,
        point_widths=(8, 16), embed_width=16, encoder_widths=(16, 16),
        decoder_widths=(16, 16), n_points=32,
    )


def test_train_deterministic(four, cylinder):
    recs = [make_record(four, cylinder, i) for i in range(4)]
    objs = {"cylinder": cylinder}
    m1, c1 = gn.train(recs, four, objs, quick_settings())
    m2, c2 = gn.train(recs, four, objs, quick_settings())
    assert c1 == c2
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(a.value, b.value)


def test_train_curves_finite_and_descending(four, cylinder):
    recs = [make_record(four, cylinder, i) for i in range(4)]
    model, curves = gn.train(recs, four, {"cylinder": cylinder}, quick_settings(8))
    assert [c.epoch for c in curves] == list(range(8))
    for c in curves:
        assert np.isfinite([c.loss_rec, c.loss_kld, c.total]).all()
    assert curves[-1].loss_rec < curves[0].loss_rec


def test_train_overfits_single_example(four, cylinder):
    met = GraspMetrics(0.01, 0.001, 0.0, 0.0, True)
    rec = GraspRecord(
        "cylinder", "cylinder", cylinder.scale, four.name,
        bounded_config(four, 21), met, (0.1, 0.1, 1.0, 0.0, 0.0), 21, "synthesized",
    )
    settings = gn.TrainSettings(
        epochs=400, batch_size=1, step_size=3e-3, beta=0.0, seed=0, n_z=8,
        point_widths=(16, 32), embed_width=32, encoder_widths=(32, 32),
        decoder_widths=(64, 64), n_points=128,
    )
    model, _ = gn.train([rec], four, {"cylinder": cylinder}, settings)
    feats = gn.object_features(cylinder, 128)
    mu = gn.encode(model, feats, rec.config).mu
    pred = gn.decode(model, mu, gn.object_embedding(model, feats))
    assert gn.loss_rec(pred, rec.config, four) < 1e-4


# ---------------------------------------------------------------- sampling


def test_sample_empty_and_deterministic(four, cylinder):
    model = tiny_model(four)
    randomize(model)
    assert gn.sample(model, cylinder, 0, seed=1) == []
    a = gn.sample(model, cylinder, 5, seed=2)
    b = gn.sample(model, cylinder, 5, seed=2)
    c = gn.sample(model, cylinder, 5, seed=3)
    assert len(a) == 5
    for x, y in zip(a, b):
        assert np.array_equal(x.translation, y.translation)
        assert np.array_equal(x.rotation, y.rotation)
        assert np.array_equal(x.joint_angles, y.joint_angles)
    assert not np.array_equal(a[0].translation, c[0].translation)


def test_sample_rejects_negative(four, cylinder):
    with pytest.raises(ValueError):
        gn.sample(tiny_model(four), cylinder, -1, seed=0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(four, cylinder, tmp_path):
    model = tiny_model(four)
    randomize(model)
    path = tmp_path / "model.ckpt"
    gn.save_checkpoint(model, path)
    loaded = gn.load_checkpoint(path)
    assert loaded.hand_id == model.hand_id
    assert loaded.n_z == model.n_z
    assert loaded.point_encoder.point_widths == model.point_encoder.point_widths
    assert np.allclose(loaded.joint_limits, model.joint_limits)
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(b.value, a.value.astype("<f4").astype(np.float64))
    x = gn.sample(model, cylinder, 2, seed=9)
    y = gn.sample(loaded, cylinder, 2, seed=9)
    for p, q in zip(x, y):
        assert np.abs(p.translation - q.translation).max() < 1e-4


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTAMODEL")
    with pytest.raises(ValueError, match="not a model checkpoint"):
        gn.load_checkpoint(path)


def test_checkpoint_rejects_future_schema(four, tmp_path):
    path = tmp_path / "model.ckpt"
    gn.save_checkpoint(tiny_model(four), path)
    data = bytearray(path.read_bytes())
    import struct

    struct.pack_into("<I", data, len(gn.CHECKPOINT_MAGIC), 99)
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="schema 99"):
        gn.load_checkpoint(path)


def test_checkpoint_rejects_truncation(four, tmp_path):
    path = tmp_path / "model.ckpt"
    gn.save_checkpoint(tiny_model(four), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 10])
    with pytest.raises(ValueError, match="truncated"):
        gn.load_checkpoint(path)
