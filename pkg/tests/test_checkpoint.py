import struct

import numpy as np
import pytest

from mixalign.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


def sample():
    rng = np.random.default_rng(0)
    meta = {"epoch": 3, "rng": {"state": 12345678901234567890}, "best": -np.inf, "history": [{"a": 0.1}]}
    arrays = {"w": rng.normal(size=(3, 4)), "b": np.zeros(4), "scalar": np.array(2.5), "ints": np.arange(3)}
    return meta, arrays


def test_round_trip(tmp_path):
    meta, arrays = sample()
    save_checkpoint(tmp_path / "a.ckpt", meta, arrays)
    meta2, arrays2 = load_checkpoint(tmp_path / "a.ckpt")
    assert meta2["epoch"] == 3 and meta2["best"] == -np.inf
    assert meta2["rng"]["state"] == 12345678901234567890
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert arrays2[k].dtype == np.float64
        np.testing.assert_array_equal(arrays2[k], arrays[k])


def test_save_load_save_is_byte_identical(tmp_path):
    meta, arrays = sample()
    save_checkpoint(tmp_path / "a.ckpt", meta, arrays)
    save_checkpoint(tmp_path / "b.ckpt", *load_checkpoint(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_no_temporary_left_behind(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", *sample())
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "json"])
def test_damaged_files_rejected(tmp_path, damage):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, *sample())
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:8] = b"NOTACKPT"
    elif damage == "version":
        raw[8:12] = struct.pack("<I", 99)
    elif damage == "truncate":
        raw = raw[:-5]
    elif damage == "trailing":
        raw += b"\x00"
    elif damage == "json":
        raw[20] = ord("}")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file_and_bad_blob(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {}, {"s": np.array(["a"])})
    assert MAGIC.startswith(b"MIXALGN")
