import json
import struct

import numpy as np
import pytest

from hsgas import persist
from hsgas.persist import CheckpointError


def test_csv_round_trip_preserves_floats_exactly(tmp_path):
    path = tmp_path / "t.csv"
    cols = {
        "a": [1.0 / 3.0, 2.5e-17, -1.0],
        "b": [1, 2, 3],
        "label": ["x", "y", "with,comma"],
    }
    persist.write_csv(path, cols, meta={"kind": "demo", "n": 5, "f": 0.1})
    meta, back = persist.read_csv(path)
    assert meta == {"kind": "demo", "n": "5", "f": "0.1"}
    assert [float(x) for x in back["a"]] == cols["a"]
    assert [int(x) for x in back["b"]] == cols["b"]
    assert back["label"] == cols["label"]


def test_csv_rejects_ragged_columns(tmp_path):
    with pytest.raises(ValueError):
        persist.write_csv(tmp_path / "x.csv", {"a": [1, 2], "b": [1]})
    with pytest.raises(ValueError):
        persist.write_csv(tmp_path / "x.csv", {})


def test_csv_write_is_byte_stable(tmp_path):
    cols = {"v": [0.1, 0.2, float("inf")]}
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    persist.write_csv(p1, cols, {"z": 1, "a": 2})
    persist.write_csv(p2, cols, {"a": 2, "z": 1})
    assert p1.read_bytes() == p2.read_bytes()
    # meta lines are sorted by key
    assert p1.read_text().startswith("# a = 2\n# z = 1\n")


def test_canonical_json_is_key_order_independent():
    a = persist.canonical_json({"b": 1, "a": [1, 2], "c": {"y": 0.5, "x": None}})
    b = persist.canonical_json({"c": {"x": None, "y": 0.5}, "a": [1, 2], "b": 1})
    assert a == b
    assert persist.config_hash({"b": 1, "a": 2}) == persist.config_hash({"a": 2, "b": 1})
    assert persist.config_hash({"a": 2}) != persist.config_hash({"a": 3})


def test_json_file_round_trip(tmp_path):
    obj = {"x": 1.25, "y": [1, 2, 3], "z": {"nested": True}, "w": None}
    path = tmp_path / "o.json"
    persist.write_json(path, obj)
    assert persist.read_json(path) == obj
    assert path.read_text().endswith("\n")


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "f": rng.normal(size=(4, 5)),
        "i": rng.integers(-5, 5, size=7),
        "flags": np.array([1, 0, 1], dtype=np.uint8),
        "scalarish": np.array(3.5),
        "withnan": np.array([1.0, np.nan, np.inf]),
    }
    meta = {"n": 12, "label": "abc", "nested": {"x": [1, 2]}, "v": 0.1}
    path = tmp_path / "c.ckpt"
    persist.save_checkpoint(path, meta, arrays)
    meta2, arrays2 = persist.load_checkpoint(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].dtype == arrays[k].dtype
        assert arrays2[k].shape == arrays[k].shape
        assert np.array_equal(arrays2[k], arrays[k], equal_nan=True)


def test_checkpoint_write_is_byte_stable(tmp_path):
    arrays = {"b": np.arange(3.0), "a": np.arange(4)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    persist.save_checkpoint(p1, {"k": 1}, arrays)
    persist.save_checkpoint(p2, {"k": 1}, dict(reversed(list(arrays.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "h.ckpt"
    persist.save_checkpoint(path, {}, {})
    raw = path.read_bytes()
    assert raw[:4] == b"HSCK"
    assert struct.unpack("<I", raw[4:8])[0] == persist.CHECKPOINT_VERSION
    (mlen,) = struct.unpack("<Q", raw[8:16])
    assert json.loads(raw[16:16 + mlen]) == {}


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    path = tmp_path / "c.ckpt"
    persist.save_checkpoint(path, {"a": 1}, {"x": np.arange(3)})
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        persist.load_checkpoint(bad)

    futur = bytearray(raw)
    futur[4:8] = struct.pack("<I", 999)
    bad.write_bytes(bytes(futur))
    with pytest.raises(CheckpointError, match="version"):
        persist.load_checkpoint(bad)

    bad.write_bytes(bytes(raw[:-8]))
    with pytest.raises(CheckpointError, match="truncated"):
        persist.load_checkpoint(bad)


def test_event_log_round_trip(tmp_path):
    from hsgas.dynamics import EVENT_DTYPE
    rec = np.zeros(5, dtype=EVENT_DTYPE)
    rec["time"] = np.linspace(0, 1, 5)
    rec["kind"] = [0, 1, 0, 1, 1]
    rec["i"] = np.arange(5)
    rec["vi_pre"] = np.ones((5, 3))
    path = tmp_path / "ev.npy"
    persist.write_event_log(path, rec)
    back = persist.read_event_log(path)
    assert back.dtype == EVENT_DTYPE
    assert np.array_equal(back, rec)


def test_format_value_conventions():
    assert persist.format_value(True) == "true"
    assert persist.format_value(False) == "false"
    assert persist.format_value(np.int64(4)) == "4"
    assert persist.format_value(0.1) == repr(0.1)
    assert float(persist.format_value(1.0 / 3.0)) == 1.0 / 3.0
