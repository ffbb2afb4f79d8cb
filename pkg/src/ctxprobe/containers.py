"""Binary tensor containers shared by every pipeline stage.

Layout (bit-exact):
  bytes 0-7    magic, e.g. b"CTXPW001"
  bytes 8-15   little-endian u64 header length H
  bytes 16..16+H  UTF-8 JSON header: {tensor name -> {"dtype": "f32",
               "shape": [...], "offset": int, "length": int}, "config": {...}}
  remainder    raw little-endian IEEE-754 float32 payload, row-major;
               offsets are relative to byte 16+H (start of the data section)

The same framing carries model weights (CTXPW001), embeddings (CTXPE001),
BOLD runs (CTXPB001) and R-score maps (CTXPR001); they differ only in magic
and in the tensors/config fields each reader requires. Writers emit the
header with sorted keys and compact separators so identical contents give
identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, SchemaError, ShapeError

MAGIC_WEIGHTS = b"CTXPW001"
MAGIC_EMBEDDINGS = b"CTXPE001"
MAGIC_BOLD = b"CTXPB001"
MAGIC_RSCORES = b"CTXPR001"

_KNOWN_MAGICS = (MAGIC_WEIGHTS, MAGIC_EMBEDDINGS, MAGIC_BOLD, MAGIC_RSCORES)


def write_container(path, magic: bytes, tensors: dict, config: dict) -> None:
    """Write named float32 tensors plus a config object to `path`.

    Tensors are laid out contiguously in sorted-name order. Values are cast
    to little-endian float32; anything non-convertible raises ValueError.
    """
    if len(magic) != 8:
        raise ValueError(f"magic must be 8 bytes, got {magic!r}")
    names = sorted(tensors)
    header: dict = {}
    blobs = []
    offset = 0
    for name in names:
        if name == "config":
            raise ValueError("'config' is a reserved header key")
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header["config"] = config
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def read_container(path, magic: bytes):
    """Read a container, returning (tensors dict of float32 arrays, config dict).

    Raises FormatError on framing problems (bad magic, truncation) and
    SchemaError when the header is not valid JSON of the expected shape.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"{path}: file not found") from e
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated container ({len(raw)} bytes)")
    got_magic = raw[:8]
    if got_magic != magic:
        known = got_magic in _KNOWN_MAGICS
        detail = "a different container type" if known else "not a ctxprobe container"
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r} ({detail})")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise FormatError(f"{path}: header length {header_len} overruns file")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"{path}: header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict) or "config" not in header:
        raise SchemaError(f"{path}: header must be an object with a 'config' entry")
    config = header.pop("config")
    data = raw[16 + header_len :]
    tensors = {}
    for name, meta in header.items():
        try:
            dtype, shape, off, length = meta["dtype"], meta["shape"], meta["offset"], meta["length"]
        except (TypeError, KeyError) as e:
            raise SchemaError(f"{path}: tensor {name!r} entry missing field {e}") from e
        if dtype != "f32":
            raise SchemaError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if off < 0 or off + length > len(data):
            raise FormatError(f"{path}: tensor {name!r} data [{off}, {off + length}) overruns payload")
        n_elem = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if length != 4 * n_elem:
            raise ShapeError(
                f"{path}: tensor {name!r} length {length} inconsistent with shape {shape}"
            )
        arr = np.frombuffer(data, dtype="<f4", count=n_elem, offset=off).reshape(shape)
        tensors[name] = arr.copy()  # detach from the file buffer
    return tensors, config


def require_tensor(tensors: dict, name: str, shape, path="container"):
    """Fetch a tensor by name, checking its exact shape."""
    if name not in tensors:
        raise SchemaError(f"{path}: missing tensor {name!r}")
    arr = tensors[name]
    expected = tuple(shape)
    if tuple(arr.shape) != expected:
        raise ShapeError(f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, expected {expected}")
    return arr
