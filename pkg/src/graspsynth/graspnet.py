"""Conditional VAE that learns grasp configurations from synthesized records.

The object enters as a fixed-count point set with per-point features and
is pooled into a single embedding by a small point network; the encoder
maps (embedding, grasp) to a latent Gaussian, the decoder maps (latent,
embedding) back to a full grasp configuration. Sampling draws latents
from the standard normal, so the encoder is not used at generation time.

Conditioning uses raw geometry only: xyz plus surface normals. No
pretrained point-feature extractor is involved; object_features accepts
extra per-point channels so precomputed features can be plugged in
later without touching the model code.

Everything differentiates through the same reverse-mode tape the
synthesis optimizer uses, including forward kinematics and the chamfer
reconstruction loss; there is no external ML framework.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .affordance import AffordanceObject, rescale_object
from .geometry.pointcloud import chamfer_distance
from .hand import (
    GraspConfiguration,
    HandModel,
    forward_kinematics_tape,
    hand_surface_points,
    transform_points_tape,
)
from .synthesis import _chamfer_node

CHECKPOINT_MAGIC = b"GSPNET\x00"
CHECKPOINT_SCHEMA = 1
_RESAMPLE_SEED = 727565  # fixed: object resampling is part of the data, not the run
_BASE_CHANNELS = 6  # xyz + normal


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the latent space."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same length")
        if not np.all(self.sigma > 0):
            raise ValueError("sigma must be strictly positive")


@dataclass(frozen=True)
class TrainSettings:
    """Optimization hyperparameters plus the network sizes they build."""

    epochs: int = 40
    batch_size: int = 16
    step_size: float = 1e-3
    beta: float = 1e-3  # KLD weight
    seed: int = 0
    n_z: int = 32
    point_widths: tuple = (64, 128)
    embed_width: int = 128
    encoder_widths: tuple = (128, 128)
    decoder_widths: tuple = (128, 128)
    n_points: int = 512

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.n_z < 1 or self.n_points < 1:
            raise ValueError("n_z and n_points must be >= 1")


@dataclass
class PointSetEncoder:
    """Per-point dense layers pooled by max into one embedding vector.

    The pool is a symmetric reduction, so the embedding is invariant to
    input point order.
    """

    point_widths: tuple
    embed_width: int
    weights: list = field(default_factory=list)  # [W, b] per layer, pool head last


@dataclass
class GraspNet:
    """CVAE weights plus the hand metadata needed to decode a grasp."""

    hand_id: str
    dof: int
    joint_limits: np.ndarray  # (dof, 2)
    n_z: int
    n_points: int
    extra_channels: int
    point_encoder: PointSetEncoder
    encoder_widths: tuple
    encoder_weights: list  # trunk pairs, then mu head pair, then log-sigma head pair
    decoder_widths: tuple
    decoder_weights: list  # trunk pairs, then output head pair

    def parameters(self) -> list:
        return self.point_encoder.weights + self.encoder_weights + self.decoder_weights

    @property
    def channels(self) -> int:
        return _BASE_CHANNELS + self.extra_channels

    @property
    def grasp_dim(self) -> int:
        return 3 + 6 + self.dof


def _dense_pair(rng, fan_in, fan_out, w_scale=None, bias=None):
    if w_scale is None:
        w_scale = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, w_scale, size=(fan_in, fan_out)) if w_scale > 0 else np.zeros(
        (fan_in, fan_out)
    )
    b = np.zeros(fan_out) if bias is None else np.asarray(bias, dtype=np.float64)
    return [ad.leaf(w), ad.leaf(b)]


def build_model(hand: HandModel, n_z: int = 32, point_widths=(64, 128),
                embed_width: int = 128, encoder_widths=(128, 128),
                decoder_widths=(128, 128), n_points: int = 512,
                extra_channels: int = 0, seed: int = 0) -> GraspNet:
    """Freshly initialized model for one hand.

    Latent heads start at zero so an untrained encoder reports the prior
    (mu = 0, sigma = 1). The decoder's rotation head is biased to the
    identity rotation so Gram-Schmidt starts well-conditioned.
    """
    rng = np.random.default_rng(seed)
    channels = _BASE_CHANNELS + extra_channels

    pe_weights = []
    prev = channels
    for width in point_widths:
        pe_weights += _dense_pair(rng, prev, width)
        prev = width
    pe_weights += _dense_pair(rng, prev, embed_width)
    encoder = PointSetEncoder(tuple(point_widths), embed_width, pe_weights)

    grasp_dim = 3 + 6 + hand.dof
    enc_weights = []
    prev = embed_width + grasp_dim
    for width in encoder_widths:
        enc_weights += _dense_pair(rng, prev, width)
        prev = width
    enc_weights += _dense_pair(rng, prev, n_z, w_scale=0.0)  # mu head
    enc_weights += _dense_pair(rng, prev, n_z, w_scale=0.0)  # log-sigma head

    dec_weights = []
    prev = n_z + embed_width
    for width in decoder_widths:
        dec_weights += _dense_pair(rng, prev, width)
        prev = width
    head_bias = np.concatenate([np.zeros(3), [1, 0, 0, 0, 1, 0], np.zeros(hand.dof)])
    dec_weights += _dense_pair(rng, prev, grasp_dim, w_scale=0.01, bias=head_bias)

    return GraspNet(
        hand_id=hand.name,
        dof=hand.dof,
        joint_limits=hand.limits_array(),
        n_z=n_z,
        n_points=n_points,
        extra_channels=extra_channels,
        point_encoder=encoder,
        encoder_widths=tuple(encoder_widths),
        encoder_weights=enc_weights,
        decoder_widths=tuple(decoder_widths),
        decoder_weights=dec_weights,
    )


# ---------------------------------------------------------------------------
# conditioning


def object_features(obj: AffordanceObject, n_points: int = 512,
                    extra_features=None) -> np.ndarray:
    """(n_points, 6 + extra) conditioning matrix: xyz, normal, extras.

    Resampling to the fixed count uses a constant seed: the subset is a
    property of the object, identical across runs. A cloud already at
    n_points passes through unchanged, preserving caller ordering.
    """
    if obj.surface.normals is None:
        raise ValueError("object conditioning needs surface normals")
    cols = [obj.surface.points, obj.surface.normals]
    if extra_features is not None:
        extra = np.asarray(extra_features, dtype=np.float64)
        if extra.ndim != 2 or extra.shape[0] != obj.surface.points.shape[0]:
            raise ValueError("extra_features must align with the surface cloud rows")
        cols.append(extra)
    base = np.hstack(cols)
    n = base.shape[0]
    if n == n_points:
        return base.copy()
    rng = np.random.default_rng(_RESAMPLE_SEED)
    idx = rng.choice(n, size=n_points, replace=n < n_points)
    return base[idx]


def _layer_pairs(weights):
    return [(weights[i], weights[i + 1]) for i in range(0, len(weights), 2)]


def _embed_node(encoder: PointSetEncoder, features: np.ndarray):
    """(1, embed_width) row node; row vectors keep every matmul rank-2."""
    pairs = _layer_pairs(encoder.weights)
    x = features
    for w, b in pairs[:-1]:
        x = ad.relu(ad.add(ad.matmul(x, w), b))
    pooled = ad.amax(x, axis=0, keepdims=True)
    w, b = pairs[-1]
    return ad.add(ad.matmul(pooled, w), b)


def object_embedding(model: GraspNet, features: np.ndarray) -> np.ndarray:
    """Pooled conditioning vector for one object's feature matrix."""
    features = _check_features(model, features)
    return ad.val(_embed_node(model.point_encoder, features)).reshape(-1)


def _check_features(model: GraspNet, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (model.n_points, model.channels):
        raise ValueError(
            f"features must be ({model.n_points}, {model.channels}), "
            f"got {features.shape}"
        )
    return features


def _grasp_vector(config: GraspConfiguration) -> np.ndarray:
    rot = tf.quat_to_matrix(config.rotation)
    return np.concatenate([config.translation, rot[:, 0], rot[:, 1],
                           config.joint_angles])


# ---------------------------------------------------------------------------
# encode / decode


def _encode_nodes(model: GraspNet, embed, grasp_vec: np.ndarray):
    """(mu, log-sigma) row nodes from an embedding row node and a grasp vector."""
    x = ad.concatenate([embed, grasp_vec.reshape(1, -1)], axis=1)
    pairs = _layer_pairs(model.encoder_weights)
    trunk, heads = pairs[:-2], pairs[-2:]
    for w, b in trunk:
        x = ad.relu(ad.add(ad.matmul(x, w), b))
    mu = ad.add(ad.matmul(x, heads[0][0]), heads[0][1])
    log_sigma = ad.add(ad.matmul(x, heads[1][0]), heads[1][1])
    return mu, log_sigma


def encode(model: GraspNet, features, config: GraspConfiguration) -> LatentDistribution:
    """Latent Gaussian for one (object, grasp) pair.

    features must already be resampled to the model's fixed point count;
    sigma comes from an exponential, so it is always strictly positive.
    """
    features = _check_features(model, features)
    if config.joint_angles.shape != (model.dof,):
        raise ValueError(
            f"grasp has {config.joint_angles.shape[0]} joints, model expects {model.dof}"
        )
    embed = _embed_node(model.point_encoder, features)
    mu, log_sigma = _encode_nodes(model, embed, _grasp_vector(config))
    return LatentDistribution(
        ad.val(mu).reshape(-1), np.exp(ad.val(log_sigma)).reshape(-1)
    )


def reparameterize(dist: LatentDistribution, noise) -> np.ndarray:
    """z = mu + sigma * noise, with sigma floored at 1e-6."""
    noise = np.asarray(noise, dtype=np.float64).reshape(-1)
    if noise.shape != dist.mu.shape:
        raise ValueError("noise length must match the latent dimension")
    return dist.mu + np.maximum(dist.sigma, 1e-6) * noise


def _gram_schmidt_node(r6):
    """(3,3) rotation node from six numbers: two columns orthonormalized,
    third from the cross product."""
    a1 = r6[0:3]
    a2 = r6[3:6]
    n1 = ad.sqrt(ad.add(ad.asum(ad.square(a1)), 1e-12))
    b1 = ad.div(a1, n1)
    proj = ad.asum(ad.mul(b1, a2))
    u2 = ad.sub(a2, ad.mul(proj, b1))
    n2 = ad.sqrt(ad.add(ad.asum(ad.square(u2)), 1e-12))
    b2 = ad.div(u2, n2)
    b3 = ad.cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=1)


def _decode_nodes(model: GraspNet, z, embed):
    """(translation, rotation matrix, joints) nodes from latent and embedding.

    z and embed are (1, n) rows, node or array. Joints pass through a
    tanh squash onto the limit interval, so they are always strictly
    inside the limits and stay differentiable.
    """
    x = ad.concatenate([z, embed], axis=1)
    pairs = _layer_pairs(model.decoder_weights)
    for w, b in pairs[:-1]:
        x = ad.relu(ad.add(ad.matmul(x, w), b))
    w, b = pairs[-1]
    out = ad.reshape(ad.add(ad.matmul(x, w), b), (model.grasp_dim,))
    translation = out[0:3]
    rotation = _gram_schmidt_node(out[3 : 3 + 6])
    lo = model.joint_limits[:, 0]
    hi = model.joint_limits[:, 1]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    joints = ad.add(mid, ad.mul(half, ad.tanh(out[9:])))
    return translation, rotation, joints


def decode(model: GraspNet, z, object_embedding) -> GraspConfiguration:
    """Grasp configuration for one latent vector and object embedding."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    emb = np.asarray(object_embedding, dtype=np.float64).reshape(-1)
    if z.shape != (model.n_z,):
        raise ValueError(f"latent must have length {model.n_z}, got {z.shape[0]}")
    if emb.shape != (model.point_encoder.embed_width,):
        raise ValueError("embedding length does not match the model")
    t, rot, joints = _decode_nodes(model, z.reshape(1, -1), emb.reshape(1, -1))
    quat = tf.quat_normalize(tf.matrix_to_quat(ad.val(rot)))
    # at tanh saturation mid + half can land one ulp outside a limit
    angles = np.clip(ad.val(joints), model.joint_limits[:, 0],
                     model.joint_limits[:, 1])
    return GraspConfiguration(ad.val(t), quat, angles)


# ---------------------------------------------------------------------------
# losses


def loss_rec(predicted: GraspConfiguration, ground_truth: GraspConfiguration,
             hand: HandModel) -> float:
    """Chamfer distance between the two posed hand surface clouds (m^2)."""
    a = hand_surface_points(hand, predicted).points
    b = hand_surface_points(hand, ground_truth).points
    return chamfer_distance(a, b)


def loss_kld(dist: LatentDistribution) -> float:
    """KL divergence of the latent Gaussian from the standard normal."""
    s2 = dist.sigma**2
    return float(0.5 * np.sum(dist.mu**2 + s2 - np.log(s2) - 1.0))


def _kld_node(mu, log_sigma):
    two_ls = ad.mul(log_sigma, 2.0)
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(two_ls)), ad.add(two_ls, 1.0))
    return ad.mul(ad.asum(inner), 0.5)


def _surface_groups(hand: HandModel):
    return [
        (i, hand.links[i].surface_points.points)
        for i in range(len(hand.links))
        if hand.links[i].surface_points.points.shape[0]
    ]


def _loss_rec_node(hand: HandModel, groups, t, rot, joints, target: np.ndarray):
    rots, poss = forward_kinematics_tape(hand, rot, t, joints)
    parts = [transform_points_tape(rots[i], poss[i], pts) for i, pts in groups]
    cloud = parts[0] if len(parts) == 1 else ad.concatenate(parts, axis=0)
    return _chamfer_node(cloud, target)


# ---------------------------------------------------------------------------
# training


class EpochStats(NamedTuple):
    epoch: int
    loss_rec: float
    loss_kld: float
    total: float


def train(records, hand: HandModel, objects, settings: TrainSettings | None = None):
    """Fit a fresh model to a grasp dataset; returns (model, per-epoch stats).

    objects maps object_id to a base AffordanceObject; each record's
    geometry is rescaled to the record's scale before conditioning.
    Single-threaded and seeded throughout, so a fixed seed reproduces
    the run bit for bit.
    """
    records = list(records)
    if not records:
        raise ValueError("training needs at least one record")
    if settings is None:
        settings = TrainSettings()
    foreign = sorted({r.hand_id for r in records} - {hand.name})
    if foreign:
        raise ValueError(
            f"dataset mixes hands: found {foreign}, training hand is {hand.name!r}"
        )

    feature_cache = {}
    for rec in records:
        key = (rec.object_id, rec.scale)
        if key in feature_cache:
            continue
        if rec.object_id not in objects:
            raise ValueError(f"no geometry provided for object {rec.object_id!r}")
        scaled = rescale_object(objects[rec.object_id], rec.scale)
        feature_cache[key] = object_features(scaled, settings.n_points)

    model = build_model(
        hand,
        n_z=settings.n_z,
        point_widths=settings.point_widths,
        embed_width=settings.embed_width,
        encoder_widths=settings.encoder_widths,
        decoder_widths=settings.decoder_widths,
        n_points=settings.n_points,
        seed=settings.seed,
    )
    params = model.parameters()
    opt = ad.Adam(params, step_size=settings.step_size)
    rng = np.random.default_rng(settings.seed)

    groups = _surface_groups(hand)
    grasp_vecs = [_grasp_vector(r.config) for r in records]
    targets = [hand_surface_points(hand, r.config).points for r in records]
    keys = [(r.object_id, r.scale) for r in records]

    curves = []
    n = len(records)
    for epoch in range(settings.epochs):
        order = rng.permutation(n)
        rec_sum = 0.0
        kld_sum = 0.0
        for start in range(0, n, settings.batch_size):
            batch = order[start : start + settings.batch_size]
            embeds = {}
            for i in batch:
                if keys[i] not in embeds:
                    embeds[keys[i]] = _embed_node(
                        model.point_encoder, feature_cache[keys[i]]
                    )
            total = None
            for i in batch:
                embed = embeds[keys[i]]
                mu, log_sigma = _encode_nodes(model, embed, grasp_vecs[i])
                noise = rng.standard_normal(settings.n_z)
                z = ad.add(mu, ad.mul(ad.exp(log_sigma), noise))
                t, rot, joints = _decode_nodes(model, z, embed)
                rec_node = _loss_rec_node(hand, groups, t, rot, joints, targets[i])
                kld = _kld_node(mu, log_sigma)
                rec_sum += float(ad.val(rec_node))
                kld_sum += float(ad.val(kld))
                term = (
                    ad.add(rec_node, ad.mul(kld, settings.beta))
                    if settings.beta > 0
                    else rec_node
                )
                total = term if total is None else ad.add(total, term)
            loss = ad.mul(total, 1.0 / len(batch))
            grads = ad.backward(loss)
            opt.step([grads.get(id(p)) for p in params])
        mean_rec = rec_sum / n
        mean_kld = kld_sum / n
        curves.append(
            EpochStats(epoch, mean_rec, mean_kld, mean_rec + settings.beta * mean_kld)
        )
    return model, curves


def sample(model: GraspNet, obj: AffordanceObject, n: int, seed: int,
           extra_features=None) -> list:
    """n grasps decoded from i.i.d. standard-normal latents.

    The encoder plays no part here; only the object embedding conditions
    the decoder. Deterministic for a fixed seed.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    feats = object_features(obj, model.n_points, extra_features)
    emb = object_embedding(model, feats)
    rng = np.random.default_rng(seed)
    return [decode(model, rng.standard_normal(model.n_z), emb) for _ in range(n)]


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_list(model: GraspNet) -> list:
    names = []
    for i in range(0, len(model.point_encoder.weights), 2):
        names += [f"point.{i // 2}.w", f"point.{i // 2}.b"]
    for i in range(0, len(model.encoder_weights), 2):
        names += [f"encoder.{i // 2}.w", f"encoder.{i // 2}.b"]
    for i in range(0, len(model.decoder_weights), 2):
        names += [f"decoder.{i // 2}.w", f"decoder.{i // 2}.b"]
    return list(zip(names, model.parameters()))


def save_checkpoint(model: GraspNet, path) -> None:
    """Versioned binary: magic, schema, JSON shape table, f32 tensor data."""
    tensors = _tensor_list(model)
    meta = {
        "hand_id": model.hand_id,
        "dof": model.dof,
        "joint_limits": [[float(lo), float(hi)] for lo, hi in model.joint_limits],
        "n_z": model.n_z,
        "n_points": model.n_points,
        "extra_channels": model.extra_channels,
        "point_widths": list(model.point_encoder.point_widths),
        "embed_width": model.point_encoder.embed_width,
        "encoder_widths": list(model.encoder_widths),
        "decoder_widths": list(model.decoder_widths),
        "tensors": [{"name": name, "shape": list(p.value.shape)} for name, p in tensors],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_SCHEMA))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in tensors:
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path) -> GraspNet:
    """Rebuild a model from a checkpoint; refuses unknown schema versions."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    schema, blob_len = struct.unpack_from("<II", data, off)
    off += 8
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"{path}: checkpoint schema {schema} not supported (this build "
            f"reads schema {CHECKPOINT_SCHEMA})"
        )
    meta = json.loads(data[off : off + blob_len].decode("utf-8"))
    off += blob_len

    leaves = []
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if len(data) - off < count * 4:
            raise ValueError(f"{path}: truncated tensor data at {entry['name']}")
        raw = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        off += count * 4
        leaves.append(ad.leaf(raw.astype(np.float64).reshape(shape)))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor data")

    n_point = 2 * (len(meta["point_widths"]) + 1)
    n_enc = 2 * (len(meta["encoder_widths"]) + 2)
    encoder = PointSetEncoder(
        tuple(meta["point_widths"]), int(meta["embed_width"]), leaves[:n_point]
    )
    return GraspNet(
        hand_id=str(meta["hand_id"]),
        dof=int(meta["dof"]),
        joint_limits=np.array(meta["joint_limits"], dtype=np.float64),
        n_z=int(meta["n_z"]),
        n_points=int(meta["n_points"]),
        extra_channels=int(meta["extra_channels"]),
        point_encoder=encoder,
        encoder_widths=tuple(meta["encoder_widths"]),
        encoder_weights=leaves[n_point : n_point + n_enc],
        decoder_widths=tuple(meta["decoder_widths"]),
        decoder_weights=leaves[n_point + n_enc :],
    )
