"""Grasp dataset records and their line-delimited file format.

A dataset file is UTF-8 text: one JSON header line naming the schema
version and the hand every record belongs to, then one JSON object per
record. Floats are written with Python's shortest round-trip repr, so
write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hand import GraspConfiguration
from .quality import GraspMetrics

SCHEMA_VERSION = 1
PROVENANCES = ("synthesized", "sampled")


def split_seed(master_seed: int, index: int) -> int:
    """Per-record seed from one master seed and the record counter.

    Counter-based (SeedSequence spawn keys), so record i is reproducible
    without generating records 0..i-1 first.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    seq = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass
class GraspRecord:
    """One synthesized or sampled grasp with its scores, self-contained
    enough to re-evaluate: object naming, scale, full configuration, the
    five loss terms at convergence, and the seed that produced it."""

    object_id: str
    category: str
    scale: float
    hand_id: str
    config: GraspConfiguration
    metrics: GraspMetrics
    loss_terms: tuple  # (l_f, l_g, l_fc, l_ip, l_sp)
    seed: int
    provenance: str

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        terms = tuple(float(v) for v in self.loss_terms)
        if len(terms) != 5 or not all(np.isfinite(terms)):
            raise ValueError("loss_terms must be five finite scalars")
        object.__setattr__(self, "loss_terms", terms)
        object.__setattr__(self, "seed", int(self.seed))

    def to_json_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "scale": float(self.scale),
            "hand_id": self.hand_id,
            "config": {
                "translation": [float(v) for v in self.config.translation],
                "rotation": [float(v) for v in self.config.rotation],
                "joints": [float(v) for v in self.config.joint_angles],
            },
            "metrics": {
                "d_g": self.metrics.d_g,
                "d_f": self.metrics.d_f,
                "d_ip": self.metrics.d_ip,
                "d_sp": self.metrics.d_sp,
                "wrench_resistant": self.metrics.wrench_resistant,
            },
            "loss_terms": list(self.loss_terms),
            "seed": self.seed,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GraspRecord":
        cfg = d["config"]
        met = d["metrics"]
        return cls(
            object_id=str(d["object_id"]),
            category=str(d["category"]),
            scale=float(d["scale"]),
            hand_id=str(d["hand_id"]),
            config=GraspConfiguration(
                np.array(cfg["translation"], dtype=np.float64),
                np.array(cfg["rotation"], dtype=np.float64),
                np.array(cfg["joints"], dtype=np.float64),
            ),
            metrics=GraspMetrics(
                met["d_g"], met["d_f"], met["d_ip"], met["d_sp"],
                met["wrench_resistant"],
            ),
            loss_terms=tuple(d["loss_terms"]),
            seed=int(d["seed"]),
            provenance=str(d["provenance"]),
        )


@dataclass
class DatasetFile:
    """Parsed dataset: header fields, records, and any skipped lines."""

    schema_version: int
    hand_id: str
    records: list
    skipped: list  # (line_number, message) pairs, skip_malformed mode only


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(path, records, hand_id: str) -> None:
    """Write header plus one record per line; every record must match hand_id."""
    lines = [_dump({"schema": SCHEMA_VERSION, "hand_id": hand_id})]
    for i, rec in enumerate(records):
        if rec.hand_id != hand_id:
            raise ValueError(
                f"record {i} is for hand {rec.hand_id!r}, dataset is {hand_id!r}"
            )
        lines.append(_dump(rec.to_json_dict()))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_dataset(path, skip_malformed: bool = False) -> DatasetFile:
    """Parse a dataset file.

    A bad record line raises, or with skip_malformed lands in .skipped.
    A missing or future-schema header always raises: silently reading a
    format this build does not know would corrupt downstream runs.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
        schema = int(header["schema"])
        hand_id = str(header["hand_id"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: bad dataset header: {e}") from None
    if schema != SCHEMA_VERSION:
        raise ValueError(
            f"{path}: dataset schema {schema} not supported (this build "
            f"reads schema {SCHEMA_VERSION})"
        )
    records = []
    skipped = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = GraspRecord.from_json_dict(json.loads(line))
            if rec.hand_id != hand_id:
                raise ValueError(
                    f"record hand {rec.hand_id!r} does not match header {hand_id!r}"
                )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            if skip_malformed:
                skipped.append((lineno, str(e)))
                continue
            raise ValueError(f"{path}:{lineno}: bad record: {e}") from None
        records.append(rec)
    return DatasetFile(schema, hand_id, records, skipped)
