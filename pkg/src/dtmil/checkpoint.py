"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    offset  size  content
    0       8     magic b"DTMILCKP"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length N
    16      N     UTF-8 JSON header, keys sorted, no whitespace
    16+N    ...   float64 payload

The header carries ``arch`` (see ``ModelArch.to_dict``), ``seed``, the tensor
table ``tensors`` (name and shape, in ``ModelParams.tensors()`` order),
``normalizer`` (channel names or null) and a free-form ``meta`` dict.  The
payload is every tensor in table order, flattened row-major, followed by the
normaliser means and then standard deviations when a normaliser is present.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatVersionError, ParseError
from .model import ModelArch, ModelParams, init_model

MAGIC = b"DTMILCKP"
FORMAT_VERSION = 1


def to_bytes(params: ModelParams, seed: int = 0, normalizer=None, meta: dict | None = None) -> bytes:
    tensors = params.tensors()
    header = {
        "arch": params.arch.to_dict(),
        "seed": int(seed),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "normalizer": None if normalizer is None else list(normalizer.channels),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors]
    if normalizer is not None:
        parts.append(np.asarray(normalizer.mean, dtype="<f8").tobytes())
        parts.append(np.asarray(normalizer.sd, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes):
    """Returns ``(params, header, normalizer_arrays)``; the last is ``(channels, mean, sd)`` or None."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise ParseError("not a DT-MIL checkpoint (bad magic)")
    version, n = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from exc
    params = init_model(ModelArch.from_dict(header["arch"]), scheme="zeros")
    offset = 16 + n
    table = header["tensors"]
    ours = params.tensors()
    if [t["name"] for t in table] != [name for name, _ in ours]:
        raise ParseError("tensor table does not match the architecture")
    for (name, arr), entry in zip(ours, table):
        if list(arr.shape) != entry["shape"]:
            raise ParseError(f"tensor {name} has shape {entry['shape']}, expected {list(arr.shape)}")
        size = arr.size * 8
        if offset + size > len(data):
            raise ParseError(f"checkpoint truncated inside tensor {name}")
        arr[...] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += size
    norm = None
    if header.get("normalizer") is not None:
        channels = header["normalizer"]
        k = len(channels)
        if offset + 16 * k != len(data):
            raise ParseError("checkpoint normaliser block has the wrong size")
        mean = np.frombuffer(data, dtype="<f8", count=k, offset=offset).copy()
        sd = np.frombuffer(data, dtype="<f8", count=k, offset=offset + 8 * k).copy()
        norm = (channels, mean, sd)
        offset += 16 * k
    if offset != len(data):
        raise ParseError("trailing bytes after checkpoint payload")
    return params, header, norm


def save_checkpoint(path, params: ModelParams, seed: int = 0, normalizer=None, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(params, seed, normalizer, meta))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())
