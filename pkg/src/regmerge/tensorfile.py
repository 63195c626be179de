"""Bit-exact serialization of checkpoints and releasable statistics.

File layout (shared by ``.ckpt``, ``.gram`` and ``.fisher`` files):

* 8-byte little-endian unsigned header length,
* UTF-8 JSON header: ``format_version``, ``kind``, ``metadata``, ``extra``
  and an ``entries`` list of ``{name, dtype, shape, offset, length}``,
* raw payload of little-endian IEEE-754 values at the declared offsets.

The files are self-describing: a stats file can be read without the
checkpoint it was computed from. Writers go through a temp file and an
atomic rename; readers only touch immutable bytes.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
NAME_RE = re.compile(r"[A-Za-z0-9_.]+\Z")

_DTYPE_TO_NP = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NP_TO_DTYPE = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class TensorFileError(Exception):
    """Base for all read/write failures of this format."""


class HeaderError(TensorFileError):
    """Malformed, truncated or inconsistent JSON header."""


class PayloadError(TensorFileError):
    """Payload truncated or byte ranges inconsistent with the header."""


class DtypeError(TensorFileError):
    """Unknown or unsupported dtype tag."""


class ValidationError(TensorFileError):
    """In-memory object violates a format invariant."""


def _check_name(name: str) -> None:
    if not name or not NAME_RE.match(name):
        raise ValidationError(f"invalid tensor name: {name!r}")


@dataclass
class NamedTensorMap:
    """An ordered checkpoint: parameter name -> dense float tensor.

    Entry order is preserved by the file format and by merging. Arrays are
    float32 or float64; metadata is a flat string map (architecture id,
    seed, source-dataset label, ...).
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for name, arr in self.entries.items():
            _check_name(name)
            if arr.dtype not in _NP_TO_DTYPE:
                raise ValidationError(f"{name}: unsupported dtype {arr.dtype}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name}: non-finite values")

    def keys(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def copy(self) -> "NamedTensorMap":
        return NamedTensorMap(
            entries={k: v.copy() for k, v in self.entries.items()},
            metadata=dict(self.metadata),
        )


@dataclass
class GramStats:
    """Per-linear-layer input inner-product sums, the releasable statistic.

    ``gram_sums[layer]`` is the raw d x d sum of x x^T over processed rows;
    ``example_counts[layer]`` counts dataset examples that contributed.
    """

    gram_sums: dict[str, np.ndarray] = field(default_factory=dict)
    example_counts: dict[str, int] = field(default_factory=dict)
    batch_cap: int = 0

    def validate(self) -> None:
        from . import linalg

        for name, g in self.gram_sums.items():
            _check_name(name)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValidationError(f"{name}: gram matrix must be square")
            scale = np.abs(g).max()
            if scale > 0 and np.abs(g - g.T).max() > linalg.SYMMETRY_RTOL * scale:
                raise ValidationError(f"{name}: gram matrix not symmetric")
            if np.diag(g).min(initial=0.0) < 0:
                raise ValidationError(f"{name}: negative diagonal in gram matrix")
            if self.example_counts.get(name, 0) <= 0:
                raise ValidationError(f"{name}: example_count must be positive")


@dataclass
class FisherStats:
    """Diagonal Fisher estimates, one nonnegative tensor per parameter."""

    fishers: dict[str, np.ndarray] = field(default_factory=dict)
    example_count: int = 0

    def validate(self) -> None:
        for name, f in self.fishers.items():
            _check_name(name)
            if f.size and f.min() < 0:
                raise ValidationError(f"{name}: negative Fisher entry")


def _write_container(path, kind: str, arrays: list[tuple[str, np.ndarray]],
                     metadata: dict, extra: dict) -> None:
    seen = set()
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays:
        _check_name(name)
        if name in seen:
            raise ValidationError(f"duplicate tensor name: {name!r}")
        seen.add(name)
        tag = _NP_TO_DTYPE.get(arr.dtype)
        if tag is None:
            raise DtypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_TO_NP[tag]).tobytes()
        entries.append({
            "name": name,
            "dtype": tag,
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "length": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": metadata,
        "extra": extra,
        "entries": entries,
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for raw in chunks:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise HeaderError(f"duplicate JSON header key: {key!r}")
        out[key] = value
    return out


def _read_container(path, expect_kind: str | None = None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise HeaderError("file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise HeaderError("declared header length exceeds file size")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"),
                            object_pairs_hook=_reject_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise HeaderError("missing or unsupported format_version")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise HeaderError(f"expected kind {expect_kind!r}, file says {kind!r}")
    payload = blob[8 + header_len:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("entries", []):
        try:
            name = entry["name"]
            tag = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"malformed entry record: {entry!r}") from exc
        _check_name(name)
        if name in arrays:
            raise HeaderError(f"duplicate entry name: {name!r}")
        if tag not in _DTYPE_TO_NP:
            raise DtypeError(f"{name}: unknown dtype tag {tag!r}")
        np_dtype = _DTYPE_TO_NP[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
        if length != expected:
            raise HeaderError(f"{name}: length {length} does not match shape {shape}")
        if off < 0 or off + length > len(payload):
            raise PayloadError(f"{name}: payload truncated")
        arr = np.frombuffer(payload[off:off + length], dtype=np_dtype).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise PayloadError(f"{name}: non-finite values in payload")
        arrays[name] = arr.copy()
    return kind, header, arrays


def write_checkpoint(tmap: NamedTensorMap, path) -> None:
    tmap.validate()
    _write_container(path, "checkpoint", list(tmap.entries.items()),
                     dict(tmap.metadata), {})


def read_checkpoint(path) -> NamedTensorMap:
    _, header, arrays = _read_container(path, "checkpoint")
    metadata = header.get("metadata", {})
    if not isinstance(metadata, dict):
        raise HeaderError("metadata must be a string map")
    return NamedTensorMap(entries=arrays, metadata={str(k): str(v) for k, v in metadata.items()})


def write_gram(stats: GramStats, path) -> None:
    stats.validate()
    arrays = [(name, np.asarray(g, dtype=np.float64)) for name, g in stats.gram_sums.items()]
    extra = {
        "example_counts": {k: int(v) for k, v in stats.example_counts.items()},
        "batch_cap": int(stats.batch_cap),
    }
    _write_container(path, "gram", arrays, {}, extra)


def read_gram(path) -> GramStats:
    _, header, arrays = _read_container(path, "gram")
    extra = header.get("extra", {})
    counts = {str(k): int(v) for k, v in extra.get("example_counts", {}).items()}
    stats = GramStats(gram_sums=arrays, example_counts=counts,
                      batch_cap=int(extra.get("batch_cap", 0)))
    stats.validate()
    return stats


def write_fisher(stats: FisherStats, path) -> None:
    stats.validate()
    arrays = [(name, np.asarray(f, dtype=np.float64)) for name, f in stats.fishers.items()]
    _write_container(path, "fisher", arrays, {}, {"example_count": int(stats.example_count)})


def read_fisher(path) -> FisherStats:
    _, header, arrays = _read_container(path, "fisher")
    extra = header.get("extra", {})
    stats = FisherStats(fishers=arrays, example_count=int(extra.get("example_count", 0)))
    stats.validate()
    return stats


def write_stats(stats, path) -> None:
    if isinstance(stats, GramStats):
        write_gram(stats, path)
    elif isinstance(stats, FisherStats):
        write_fisher(stats, path)
    else:
        raise TypeError(f"unsupported stats object: {type(stats).__name__}")


def read_stats(path):
    kind, _, _ = _read_container(path)
    if kind == "gram":
        return read_gram(path)
    if kind == "fisher":
        return read_fisher(path)
    raise HeaderError(f"not a stats file (kind={kind!r})")
