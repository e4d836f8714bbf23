"""Command-line pipeline: synthesize, filter, eval, train, sample, export.

Every command funnels randomness through one master seed expanded with a
counter-based splitter, so any single record can be regenerated without
rerunning the rest of its file. Exit codes: 0 success, 1 unusable inputs,
2 total synthesis failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import graspnet as gn
from .affordance import (
    AffordanceObject,
    CategoryScaleRange,
    ObjectLoadError,
    load_object,
    load_scale_ranges,
    rescale_object,
    sample_scales,
)
from .geometry import save_ply, tessellate_primitive
from .hand import (
    HandLoadError,
    HandModel,
    forward_kinematics,
    load_hand,
)
from .quality import FilterThresholds, evaluate_grasp, filter_grasps
from .records import GraspRecord, read_dataset, split_seed, write_dataset
from .synthesis import (
    LossWeights,
    OptimizerSettings,
    loss_functional,
    synthesize_batch,
    total_loss,
)
from .transforms import transform_points

METRIC_NAMES = ("d_G", "d_F", "d_IP", "d_SP")

# vertex colors for exported part annotations
_COLOR_PLAIN = (180, 180, 180)
_COLOR_FUNCTIONAL = (220, 50, 50)
_COLOR_GRASPING = (50, 90, 220)
_COLOR_BOTH = (200, 60, 200)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# input loading helpers


def _load_hand_checked(path) -> HandModel:
    try:
        return load_hand(path)
    except (OSError, HandLoadError, ValueError) as err:
        raise _InputError(f"cannot load hand {path}: {err}") from err


class _InputError(Exception):
    """Unreadable or invalid command input; maps to exit code 1."""


def _object_pair(path: Path) -> tuple:
    """(mesh, annotation) paths from either half of an object file pair."""
    path = Path(path)
    if path.suffix == ".json":
        return path.with_suffix(".obj"), path
    return path, path.with_suffix(".json")


def _load_object_checked(path) -> AffordanceObject:
    mesh, note = _object_pair(path)
    if not mesh.is_file() or not note.is_file():
        raise _InputError(f"object {path} needs both {mesh.name} and {note.name}")
    try:
        return load_object(mesh, note)
    except (OSError, ObjectLoadError, ValueError) as err:
        raise _InputError(f"cannot load object {path}: {err}") from err


def _discover_objects(object_dir) -> list:
    """[(object_id, AffordanceObject)] for every mesh+annotation pair, sorted."""
    root = Path(object_dir)
    if not root.is_dir():
        raise _InputError(f"object directory {root} does not exist")
    out = []
    for note in sorted(root.glob("*.json")):
        mesh = note.with_suffix(".obj")
        if mesh.is_file():
            out.append((note.stem, _load_object_checked(note)))
    if not out:
        raise _InputError(f"no mesh+annotation object pairs in {root}")
    return out


def _load_json_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise _InputError(f"cannot read config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise _InputError(f"config {path} must be a JSON object")
    return raw


def _read_dataset_checked(path, skip_malformed=False):
    try:
        return read_dataset(path, skip_malformed=skip_malformed)
    except (OSError, ValueError) as err:
        raise _InputError(str(err))


def _bundled_data_dir() -> Path:
    return Path(__file__).parent / "data"


def _resolve_hand(hand_id: str, override) -> HandModel:
    if override is not None:
        hand = _load_hand_checked(override)
        if hand.name != hand_id:
            raise _InputError(
                f"hand file {override} describes '{hand.name}', records need '{hand_id}'"
            )
        return hand
    path = _bundled_data_dir() / "hands" / f"{hand_id}.json"
    if not path.is_file():
        raise _InputError(f"no bundled hand '{hand_id}'; pass --hand-file")
    return _load_hand_checked(path)


def _resolve_object(object_id: str, object_dir) -> AffordanceObject:
    root = Path(object_dir) if object_dir else _bundled_data_dir() / "objects"
    note = root / f"{object_id}.json"
    if not note.is_file():
        raise _InputError(f"no object '{object_id}' under {root}; pass --object-dir")
    return _load_object_checked(note)


# ---------------------------------------------------------------------------
# synthesize


def _parse_scales(text: str) -> list:
    try:
        scales = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as err:
        raise _InputError(f"bad --scales value: {err}")
    if not scales or any(s <= 0 for s in scales):
        raise _InputError("--scales needs positive comma-separated numbers")
    return scales


def _synthesis_config(raw: dict):
    """(LossWeights, optimizer kwargs, scale-range table) from a config dict."""
    try:
        weights = LossWeights(**raw.get("weights", {}))
        opt_kwargs = dict(raw.get("optimizer", {}))
        ranges = dict(load_scale_ranges())
        for cat, pair in raw.get("scale_ranges", {}).items():
            ranges[cat] = CategoryScaleRange(cat, float(pair[0]), float(pair[1]))
    except (TypeError, ValueError, IndexError) as err:
        raise _InputError(f"bad synthesis config: {err}")
    return weights, opt_kwargs, ranges


def _object_scales(obj: AffordanceObject, explicit, ranges) -> list:
    if explicit is not None:
        return list(explicit)
    if obj.category not in ranges:
        return None
    return [float(s) for s in sample_scales(ranges[obj.category])]


def _best_finger(hand: HandModel, config, obj) -> str:
    return min(hand.fingers, key=lambda f: loss_functional(hand, config, obj, f))


def cmd_synthesize(args) -> int:
    hand = _load_hand_checked(args.hand_file)
    objects = _discover_objects(args.object_dir)
    weights, opt_kwargs, ranges = _synthesis_config(_load_json_config(args.config_file))
    explicit = _parse_scales(args.scales) if args.scales else None

    records = []
    attempts = 0
    counter = 0  # one splitter draw per run, across every object and scale
    for object_id, base in objects:
        scales = _object_scales(base, explicit, ranges)
        if scales is None:
            _warn(f"{object_id}: category '{base.category}' has no scale range; skipped")
            continue
        for scale in scales:
            obj = rescale_object(base, scale)
            won = 0
            for _ in range(args.n):
                run_seed = split_seed(args.seed, counter)
                counter += 1
                attempts += 1
                settings = OptimizerSettings(seed=run_seed, **opt_kwargs)
                result = synthesize_batch(hand, obj, 1, weights, settings)[0]
                if not result.success:
                    continue
                metrics = evaluate_grasp(
                    hand, result.config, obj, result.functional_finger,
                    contact_threshold=settings.contact_threshold,
                )
                records.append(GraspRecord(
                    object_id=object_id,
                    category=base.category,
                    scale=float(obj.scale),
                    hand_id=hand.name,
                    config=result.config,
                    metrics=metrics,
                    loss_terms=tuple(result.breakdown)[:5],
                    seed=run_seed,
                    provenance="synthesized",
                ))
                won += 1
            print(f"{object_id} scale {scale:.4f}: {won}/{args.n} converged")

    if attempts == 0:
        raise _InputError("nothing to synthesize: no object had usable scales")
    write_dataset(args.out_path, records, hand.name)
    print(f"wrote {len(records)} records from {attempts} runs to {args.out_path}")
    return 0 if records else 2


# ---------------------------------------------------------------------------
# filter


def _parse_thresholds(text: str) -> FilterThresholds:
    try:
        vals = [float(tok) for tok in text.split(",")]
        if len(vals) != 4:
            raise ValueError(f"expected 4 values, got {len(vals)}")
        return FilterThresholds(*vals)
    except ValueError as err:
        raise _InputError(f"bad --thresholds value: {err}")


def cmd_filter(args) -> int:
    thresholds = (
        _parse_thresholds(args.thresholds) if args.thresholds else FilterThresholds()
    )
    data = _read_dataset_checked(args.in_path, skip_malformed=True)
    for lineno, message in data.skipped:
        _warn(f"skipped malformed record at {args.in_path}:{lineno}: {message}")

    kept_idx, rejected = filter_grasps([r.metrics for r in data.records], thresholds)
    write_dataset(args.out_path, [data.records[i] for i in kept_idx], data.hand_id)

    counts = {name: 0 for name in METRIC_NAMES}
    for _, reasons in rejected:
        for name in reasons:
            counts[name] += 1
    print(f"kept {len(kept_idx)} of {len(data.records)}")
    for name in METRIC_NAMES:
        print(f"rejected by {name}: {counts[name]}")
    if data.skipped:
        print(f"skipped malformed lines: {len(data.skipped)}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    data = _read_dataset_checked(args.in_path)
    if not data.records:
        raise _InputError(f"{args.in_path} holds no records to evaluate")

    by_category: dict = {}
    for rec in data.records:
        by_category.setdefault(rec.category, []).append(rec.metrics)

    header = f"{'category':<16}{'n':>5}{'d_G(cm)':>10}{'d_F(cm)':>10}" \
             f"{'d_IP(cm)':>10}{'d_SP(cm)':>10}{'wrench%':>10}"
    print(header)
    for category in sorted(by_category):
        ms = by_category[category]
        cm = [
            100.0 * float(np.mean([getattr(m, f) for m in ms]))
            for f in ("d_g", "d_f", "d_ip", "d_sp")
        ]
        rate = 100.0 * sum(m.wrench_resistant for m in ms) / len(ms)
        print(
            f"{category:<16}{len(ms):>5}"
            f"{cm[0]:>10.3f}{cm[1]:>10.3f}{cm[2]:>10.3f}{cm[3]:>10.3f}"
            f"{rate:>10.1f}"
        )
    return 0


# ---------------------------------------------------------------------------
# train / sample


def cmd_train(args) -> int:
    data = _read_dataset_checked(args.dataset_path)
    hand = _load_hand_checked(args.hand_file)
    if data.hand_id != hand.name:
        raise _InputError(
            f"dataset is for hand '{data.hand_id}', hand file describes '{hand.name}'"
        )
    if not data.records:
        raise _InputError(f"{args.dataset_path} holds no records to train on")

    raw = _load_json_config(args.settings_file)
    try:
        for key in ("point_widths", "encoder_widths", "decoder_widths"):
            if key in raw:
                raw[key] = tuple(raw[key])
        settings = gn.TrainSettings(**raw)
    except (TypeError, ValueError) as err:
        raise _InputError(f"bad train settings: {err}")

    objects = {
        object_id: _resolve_object(object_id, args.object_dir)
        for object_id in sorted({r.object_id for r in data.records})
    }
    try:
        model, curves = gn.train(data.records, hand, objects, settings)
    except ValueError as err:
        raise _InputError(str(err))

    gn.save_checkpoint(model, args.checkpoint_out)
    curve_path = args.curve_out or f"{args.checkpoint_out}.curves.csv"
    lines = ["epoch,loss_rec,loss_kld,total"]
    lines += [f"{c.epoch},{c.loss_rec!r},{c.loss_kld!r},{c.total!r}" for c in curves]
    Path(curve_path).write_text("\n".join(lines) + "\n")
    print(f"trained {settings.epochs} epochs on {len(data.records)} records")
    print(f"wrote checkpoint {args.checkpoint_out} and curves {curve_path}")
    return 0


def cmd_sample(args) -> int:
    try:
        model = gn.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as err:
        raise _InputError(str(err))
    obj = _load_object_checked(args.object_file)
    if args.scale is not None:
        if args.scale <= 0:
            raise _InputError("--scale must be positive")
        obj = rescale_object(obj, args.scale)
    hand = _resolve_hand(model.hand_id, args.hand_file)
    object_id = _object_pair(args.object_file)[1].stem

    records = []
    for i in range(args.n):
        run_seed = split_seed(args.seed, i)
        config = gn.sample(model, obj, 1, seed=run_seed)[0]
        finger = _best_finger(hand, config, obj)
        metrics = evaluate_grasp(hand, config, obj, finger)
        _, breakdown = total_loss(hand, config, obj, functional_finger=finger)
        records.append(GraspRecord(
            object_id=object_id,
            category=obj.category,
            scale=float(obj.scale),
            hand_id=hand.name,
            config=config,
            metrics=metrics,
            loss_terms=tuple(breakdown)[:5],
            seed=run_seed,
            provenance="sampled",
        ))
    write_dataset(args.out_path, records, hand.name)
    print(f"wrote {len(records)} sampled records to {args.out_path}")
    return 0


# ---------------------------------------------------------------------------
# export


def _part_colors(obj: AffordanceObject) -> np.ndarray:
    colors = np.tile(np.array(_COLOR_PLAIN, dtype=np.uint8),
                     (obj.surface.points.shape[0], 1))
    functional = np.zeros(len(colors), dtype=bool)
    grasping = np.zeros(len(colors), dtype=bool)
    functional[obj.functional_part] = True
    grasping[obj.grasping_part] = True
    colors[functional] = _COLOR_FUNCTIONAL
    colors[grasping] = _COLOR_GRASPING
    colors[functional & grasping] = _COLOR_BOTH
    return colors


def _hand_mesh(hand: HandModel, config) -> tuple:
    """(vertices, faces) of every link primitive tessellated and posed."""
    poses = forward_kinematics(hand, config)
    verts, faces = [], []
    offset = 0
    for link, pose in zip(hand.links, poses):
        for prim in link.primitives:
            m = tessellate_primitive(prim)
            verts.append(transform_points(pose, m.vertices))
            faces.append(m.faces + offset)
            offset += len(m.vertices)
    return np.vstack(verts), np.vstack(faces)


def cmd_export(args) -> int:
    data = _read_dataset_checked(args.record_file)
    if not 0 <= args.index < len(data.records):
        raise _InputError(
            f"index {args.index} out of range; {args.record_file} holds "
            f"{len(data.records)} records"
        )
    rec = data.records[args.index]
    obj = rescale_object(_resolve_object(rec.object_id, args.object_dir), rec.scale)
    hand = _resolve_hand(rec.hand_id, args.hand_file)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"grasp{args.index:04d}"

    mesh_path = out_dir / f"{stem}_object.ply"
    save_ply(mesh_path, obj.mesh.vertices, obj.mesh.faces)
    parts_path = out_dir / f"{stem}_parts.ply"
    save_ply(parts_path, obj.surface.points, colors=_part_colors(obj))
    verts, faces = _hand_mesh(hand, rec.config)
    hand_path = out_dir / f"{stem}_hand.ply"
    save_ply(hand_path, verts, faces)

    for path in (mesh_path, parts_path, hand_path):
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graspsynth",
        description="Synthesize, score, and learn functional grasps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="run batch synthesis over objects and scales")
    p.add_argument("hand_file")
    p.add_argument("object_dir")
    p.add_argument("config_file")
    p.add_argument("out_path")
    p.add_argument("--n", type=int, default=8, help="runs per object per scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scales", help="comma-separated scales overriding category ranges")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("filter", help="drop records that violate metric thresholds")
    p.add_argument("in_path")
    p.add_argument("out_path")
    p.add_argument("--thresholds", help="max d_G,d_F,d_IP,d_SP (four numbers)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="per-category metric means in cm")
    p.add_argument("in_path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="fit the grasp generator to a dataset")
    p.add_argument("dataset_path")
    p.add_argument("hand_file")
    p.add_argument("settings_file")
    p.add_argument("checkpoint_out")
    p.add_argument("--curve-out", help="loss-curve CSV path (default: <checkpoint>.curves.csv)")
    p.add_argument("--object-dir", help="directory of object mesh+annotation pairs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw grasps from a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("object_file")
    p.add_argument("out_path")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, help="rescale the object before sampling")
    p.add_argument("--hand-file", help="hand description (default: bundled by id)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("export", help="write one record as PLY geometry")
    p.add_argument("record_file")
    p.add_argument("index", type=int)
    p.add_argument("out_dir")
    p.add_argument("--hand-file", help="hand description (default: bundled by id)")
    p.add_argument("--object-dir", help="directory of object mesh+annotation pairs")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _InputError as err:
        return _fail(str(err))


if __name__ == "__main__":
    sys.exit(main())
