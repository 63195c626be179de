import hashlib
import json
import struct

import numpy as np
import pytest

from regmerge import tensorfile as tf


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_empty_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "empty.ckpt"
    tf.write_checkpoint(tf.NamedTensorMap(), path)
    loaded = tf.read_checkpoint(path)
    assert loaded.entries == {}
    assert loaded.metadata == {}


def test_single_f32_tensor_roundtrip(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    tmap = tf.NamedTensorMap(entries={"w": arr}, metadata={"seed": "1"})
    path = tmp_path / "m.ckpt"
    tf.write_checkpoint(tmap, path)
    loaded = tf.read_checkpoint(path)
    assert loaded["w"].dtype == np.float32
    np.testing.assert_array_equal(loaded["w"], arr)
    assert loaded.metadata == {"seed": "1"}


def test_mixed_dtype_map_double_write_hash_stable(tmp_path):
    rng = np.random.default_rng(0)
    entries = {}
    for i in range(50):
        dtype = np.float32 if i % 2 else np.float64
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
        entries[f"p{i}"] = rng.normal(size=shape).astype(dtype)
    tmap = tf.NamedTensorMap(entries=entries, metadata={"arch": "test"})
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tf.write_checkpoint(tmap, p1)
    tf.write_checkpoint(tmap, p2)
    assert sha(p1) == sha(p2)
    loaded = tf.read_checkpoint(p1)
    assert loaded.keys() == tmap.keys()  # order preserved
    for k in entries:
        np.testing.assert_array_equal(loaded[k], entries[k])
        assert loaded[k].dtype == entries[k].dtype


def test_roundtrip_bit_exact_bytes(tmp_path):
    rng = np.random.default_rng(1)
    tmap = tf.NamedTensorMap(entries={"w": rng.normal(size=(4, 4))})
    p1 = tmp_path / "one.ckpt"
    tf.write_checkpoint(tmap, p1)
    p2 = tmp_path / "two.ckpt"
    tf.write_checkpoint(tf.read_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_gram_stats_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 3))
    stats = tf.GramStats(gram_sums={"head": x.T @ x},
                         example_counts={"head": 20}, batch_cap=1000)
    path = tmp_path / "m.gram"
    tf.write_gram(stats, path)
    loaded = tf.read_gram(path)
    np.testing.assert_array_equal(loaded.gram_sums["head"], stats.gram_sums["head"])
    assert loaded.example_counts == {"head": 20}
    assert loaded.batch_cap == 1000


def test_fisher_stats_roundtrip_and_dispatch(tmp_path):
    stats = tf.FisherStats(fishers={"w": np.abs(np.random.default_rng(3).normal(size=(2, 2)))},
                           example_count=10)
    path = tmp_path / "m.fisher"
    tf.write_stats(stats, path)
    loaded = tf.read_stats(path)
    assert isinstance(loaded, tf.FisherStats)
    assert loaded.example_count == 10
    np.testing.assert_array_equal(loaded.fishers["w"], stats.fishers["w"])


def test_empty_stats_roundtrip(tmp_path):
    path = tmp_path / "e.gram"
    tf.write_gram(tf.GramStats(batch_cap=5), path)
    assert tf.read_gram(path).gram_sums == {}


def test_stats_readable_without_checkpoint(tmp_path):
    # the stats file is fully self-describing
    stats = tf.GramStats(gram_sums={"layer": np.eye(2)},
                         example_counts={"layer": 4}, batch_cap=1)
    path = tmp_path / "solo.gram"
    tf.write_gram(stats, path)
    loaded = tf.read_gram(path)
    assert loaded.gram_sums["layer"].shape == (2, 2)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    tf.write_checkpoint(tf.NamedTensorMap(entries={"w": np.ones((4, 4))}), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(tf.PayloadError):
        tf.read_checkpoint(path)


def test_malformed_header_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    garbage = b"not json at all"
    path.write_bytes(struct.pack("<Q", len(garbage)) + garbage)
    with pytest.raises(tf.HeaderError):
        tf.read_checkpoint(path)


def test_header_longer_than_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(struct.pack("<Q", 10**6) + b"{}")
    with pytest.raises(tf.HeaderError):
        tf.read_checkpoint(path)


def test_unknown_dtype_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    tf.write_checkpoint(tf.NamedTensorMap(entries={"w": np.ones(2)}), path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    header["entries"][0]["dtype"] = "f16"
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + blob[8 + hlen:])
    with pytest.raises(tf.DtypeError):
        tf.read_checkpoint(path)


def test_shape_length_mismatch_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    tf.write_checkpoint(tf.NamedTensorMap(entries={"w": np.ones((2, 2))}), path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    header["entries"][0]["shape"] = [3, 2]
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + blob[8 + hlen:])
    with pytest.raises(tf.HeaderError):
        tf.read_checkpoint(path)


def test_duplicate_header_keys_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    raw = b'{"format_version": 1, "format_version": 1}'
    path.write_bytes(struct.pack("<Q", len(raw)) + raw)
    with pytest.raises(tf.HeaderError):
        tf.read_checkpoint(path)


def test_invalid_names_rejected():
    bad = tf.NamedTensorMap(entries={"has space": np.ones(1)})
    with pytest.raises(tf.ValidationError):
        bad.validate()


def test_nonfinite_values_rejected():
    bad = tf.NamedTensorMap(entries={"w": np.array([np.inf])})
    with pytest.raises(tf.ValidationError):
        bad.validate()


def test_negative_fisher_rejected():
    with pytest.raises(tf.ValidationError):
        tf.FisherStats(fishers={"w": np.array([-1.0])}, example_count=1).validate()


def test_asymmetric_gram_rejected():
    with pytest.raises(tf.ValidationError):
        tf.GramStats(gram_sums={"l": np.array([[1.0, 2.0], [0.0, 1.0]])},
                     example_counts={"l": 1}).validate()
