"""Deterministic on-disk formats.

Three families, all free of timestamps and environment-dependent content so
identical inputs produce byte-identical files:

* CSV tables: optional metadata lines first, each "# key = value" with keys
  sorted, then one header row and the data rows.  Floats are written with
  repr (shortest round-trip form), RFC-style quoting via the csv module.
* canonical JSON: sorted keys, compact separators, trailing newline.
* checkpoint container: versioned little-endian binary holding a JSON
  metadata block plus named numpy arrays.

Checkpoint layout (all integers little-endian):

    offset  size  content
    0       4     magic b"HSCK"
    4       4     u32 format version (currently 1)
    8       8     u64 metadata length M
    16      M     canonical JSON metadata (utf-8)
    --      4     u32 array count A
    then A times:
            2     u16 name length L
            L     array name (utf-8)
            2     u16 dtype string length D
            D     numpy dtype.str, little-endian or byte-order-free
            1     u8 ndim
            8*nd  u64 per-dimension sizes
            --    raw C-order array bytes
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import sys

import numpy as np

from .core import SimulationError

CHECKPOINT_MAGIC = b"HSCK"
CHECKPOINT_VERSION = 1


class CheckpointError(SimulationError):
    """Unreadable, truncated, or version-incompatible checkpoint file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(obj) -> str:
    """sha256 hex digest of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(obj))
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, columns: dict, meta: dict | None = None) -> None:
    """Write named columns of equal length with optional '#' metadata lines."""
    names = list(columns.keys())
    if not names:
        raise ValueError("need at least one column")
    lengths = {len(columns[k]) for k in names}
    if len(lengths) != 1:
        raise ValueError(f"column lengths differ: { {k: len(v) for k, v in columns.items()} }")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            for key in sorted(meta):
                fh.write(f"# {key} = {format_value(meta[key])}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in zip(*(columns[k] for k in names)):
            writer.writerow([format_value(x) for x in row])


def read_csv(path) -> tuple[dict, dict]:
    """Read back (meta, columns); all cell values are returned as strings."""
    meta: dict[str, str] = {}
    body = io.StringIO()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                text = line[1:].strip()
                key, _, value = text.partition("=")
                meta[key.strip()] = value.strip()
            else:
                body.write(line)
    body.seek(0)
    rows = list(csv.reader(body))
    if not rows:
        return meta, {}
    names = rows[0]
    columns: dict[str, list] = {name: [] for name in names}
    for row in rows[1:]:
        for name, cell in zip(names, row):
            columns[name].append(cell)
    return meta, columns


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > 0:
        # ascontiguousarray would silently promote 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and sys.byteorder == "big"):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path, meta: dict, arrays: dict) -> None:
    meta_bytes = canonical_json(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = _little_endian(np.asarray(arrays[name]))
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<H", len(dtype_b)))
            fh.write(dtype_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} not supported (have {CHECKPOINT_VERSION})")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (dtype_len,) = struct.unpack("<H", _read_exact(fh, 2, "dtype length"))
            dtype = np.dtype(_read_exact(fh, dtype_len, "dtype").decode("ascii"))
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, "shape"))[0] for _ in range(ndim)
            )
            nbytes = int(dtype.itemsize * int(np.prod(shape, dtype=np.int64)))
            data = _read_exact(fh, nbytes, f"array {name!r}")
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
        return meta, arrays


def write_event_log(path, records: np.ndarray) -> None:
    """Persist a structured event-record array (numpy .npy container)."""
    np.save(path, records, allow_pickle=False)


def read_event_log(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)
