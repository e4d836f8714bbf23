import numpy as np
import pytest

from graspsynth.hand import GraspConfiguration
from graspsynth.quality import GraspMetrics
from graspsynth.records import (
    SCHEMA_VERSION,
    GraspRecord,
    read_dataset,
    split_seed,
    write_dataset,
)


def make_record(i=0, hand_id="fourfinger16", provenance="synthesized", dof=16):
    rng = np.random.default_rng(i)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    cfg = GraspConfiguration(rng.normal(size=3) * 0.1, q, rng.uniform(0, 1, dof))
    met = GraspMetrics(0.01 * (i + 1), 0.001, 0.0005, 0.0, i % 2 == 0)
    return GraspRecord(
        object_id="cylinder",
        category="cylinder",
        scale=0.24,
        hand_id=hand_id,
        config=cfg,
        metrics=met,
        loss_terms=(0.1, 0.2, 0.3, 0.0, 0.0),
        seed=split_seed(7, i),
        provenance=provenance,
    )


# ---------------------------------------------------------------- seeds


def test_split_seed_deterministic_and_distinct():
    a = [split_seed(42, i) for i in range(50)]
    b = [split_seed(42, i) for i in range(50)]
    assert a == b
    assert len(set(a)) == 50


def test_split_seed_isolated_by_index():
    # record 30's seed must not require computing records 0..29
    assert split_seed(9, 30) == split_seed(9, 30)
    assert split_seed(9, 30) != split_seed(9, 31)
    assert split_seed(9, 30) != split_seed(10, 30)


def test_split_seed_rejects_negative_index():
    with pytest.raises(ValueError):
        split_seed(1, -1)


# ---------------------------------------------------------------- validation


def test_record_rejects_bad_provenance():
    with pytest.raises(ValueError):
        make_record(provenance="guessed")


def test_record_rejects_bad_loss_terms():
    rec = make_record()
    with pytest.raises(ValueError):
        GraspRecord(
            rec.object_id, rec.category, rec.scale, rec.hand_id, rec.config,
            rec.metrics, (0.1, 0.2), rec.seed, rec.provenance,
        )
    with pytest.raises(ValueError):
        GraspRecord(
            rec.object_id, rec.category, rec.scale, rec.hand_id, rec.config,
            rec.metrics, (0.1, 0.2, float("nan"), 0.0, 0.0), rec.seed,
            rec.provenance,
        )


def test_record_rejects_nonpositive_scale():
    rec = make_record()
    with pytest.raises(ValueError):
        GraspRecord(
            rec.object_id, rec.category, 0.0, rec.hand_id, rec.config,
            rec.metrics, rec.loss_terms, rec.seed, rec.provenance,
        )


# ---------------------------------------------------------------- round trip


def test_write_read_preserves_records(tmp_path):
    path = tmp_path / "grasps.jsonl"
    records = [make_record(i) for i in range(5)]
    write_dataset(path, records, "fourfinger16")
    ds = read_dataset(path)
    assert ds.schema_version == SCHEMA_VERSION
    assert ds.hand_id == "fourfinger16"
    assert ds.skipped == []
    assert len(ds.records) == 5
    for a, b in zip(records, ds.records):
        assert np.array_equal(a.config.translation, b.config.translation)
        assert np.array_equal(a.config.rotation, b.config.rotation)
        assert np.array_equal(a.config.joint_angles, b.config.joint_angles)
        assert a.metrics == b.metrics
        assert a.loss_terms == b.loss_terms
        assert (a.seed, a.provenance, a.scale) == (b.seed, b.provenance, b.scale)


def test_write_read_write_byte_identical(tmp_path):
    p1 = tmp_path / "a.jsonl"
    p2 = tmp_path / "b.jsonl"
    write_dataset(p1, [make_record(i) for i in range(4)], "fourfinger16")
    ds = read_dataset(p1)
    write_dataset(p2, ds.records, ds.hand_id)
    assert p1.read_bytes() == p2.read_bytes()


def test_write_rejects_foreign_hand(tmp_path):
    recs = [make_record(0), make_record(1, hand_id="fivefinger22")]
    with pytest.raises(ValueError, match="fivefinger22"):
        write_dataset(tmp_path / "x.jsonl", recs, "fourfinger16")


# ---------------------------------------------------------------- bad input


def test_read_rejects_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        read_dataset(path)


def test_read_rejects_bad_header(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text("not json\n")
    with pytest.raises(ValueError, match="header"):
        read_dataset(path)


def test_read_rejects_future_schema(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text('{"schema":99,"hand_id":"fourfinger16"}\n')
    with pytest.raises(ValueError, match="schema 99"):
        read_dataset(path)


def test_read_strict_raises_on_malformed_record(tmp_path):
    path = tmp_path / "x.jsonl"
    write_dataset(path, [make_record(0)], "fourfinger16")
    with open(path, "a") as f:
        f.write('{"object_id":"broken"}\n')
    with pytest.raises(ValueError, match=":3"):
        read_dataset(path)


def test_read_skip_malformed_collects_lines(tmp_path):
    path = tmp_path / "x.jsonl"
    write_dataset(path, [make_record(0), make_record(1)], "fourfinger16")
    lines = path.read_text().splitlines()
    lines.insert(2, "garbage {")
    path.write_text("\n".join(lines) + "\n")
    ds = read_dataset(path, skip_malformed=True)
    assert len(ds.records) == 2
    assert len(ds.skipped) == 1
    assert ds.skipped[0][0] == 3


def test_read_skips_record_of_wrong_hand(tmp_path):
    path = tmp_path / "x.jsonl"
    write_dataset(path, [make_record(0)], "fourfinger16")
    other = make_record(1, hand_id="fivefinger22")
    import json

    with open(path, "a") as f:
        f.write(json.dumps(other.to_json_dict(), sort_keys=True) + "\n")
    with pytest.raises(ValueError, match="does not match"):
        read_dataset(path)
    ds = read_dataset(path, skip_malformed=True)
    assert len(ds.records) == 1 and len(ds.skipped) == 1


def test_read_tolerates_blank_lines(tmp_path):
    path = tmp_path / "x.jsonl"
    write_dataset(path, [make_record(0)], "fourfinger16")
    with open(path, "a") as f:
        f.write("\n\n")
    assert len(read_dataset(path).records) == 1
