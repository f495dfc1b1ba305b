"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"MMDACKPT" | u32 format version | u32 header byte length
    | header: UTF-8 JSON, keys sorted
    | tensors: float32 data, in the order listed by header["tensors"]

The header carries the model kind and dims, the vocabularies and their
hashes, the list of ``[name, shape]`` tensor records and any JSON-able
training state (step, phase, RNG and stream states). Writing is fully
deterministic, so save -> load -> save reproduces the file byte for byte.
"""

import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"MMDACKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def write_container(path, header, arrays):
    """``arrays``: ordered mapping name -> ndarray (stored as float32)."""
    header = dict(header)
    header["tensors"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_container(path):
    """Returns ``(header, arrays)``; raises :class:`CheckpointError` naming the
    offending field for any structural problem."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from None
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (field 'prefix'): {len(data)} bytes")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic (field 'magic'): {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version (field 'version'): {version} != {FORMAT_VERSION}")
    end = _PREFIX.size + hlen
    if len(data) < end:
        raise CheckpointError(f"{path}: truncated (field 'header'): need {end} bytes, got {len(data)}")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header (field 'header'): {e}") from None
    records = header.get("tensors")
    if not isinstance(records, list):
        raise CheckpointError(f"{path}: header lacks field 'tensors'")
    expected = end + 4 * sum(int(np.prod(shape)) for _, shape in records)
    if len(data) != expected:
        raise CheckpointError(f"{path}: truncated or oversized payload (field 'tensors'): "
                              f"expected {expected} bytes, got {len(data)}")
    arrays = {}
    off = end
    for name, shape in records:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return header, arrays


def check_tensors(arrays, expected_shapes, prefix=""):
    """Every expected name present with the expected shape."""
    for name, shape in expected_shapes.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"missing tensor (field '{key}')")
        if tuple(arrays[key].shape) != tuple(shape):
            raise CheckpointError(
                f"shape mismatch (field '{key}'): {tuple(arrays[key].shape)} != {tuple(shape)}")
