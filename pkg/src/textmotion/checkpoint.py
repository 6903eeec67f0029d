"""Checkpoint container.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then the
tensor payload as contiguous little-endian float32 arrays. The header lists
each tensor's name, shape, dtype and byte offset into the payload; tensors are
written in sorted name order and the JSON is emitted with sorted keys, so
identical weights and metadata always give identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from textmotion.errors import ParseError

FORMAT = "textmotion-checkpoint/1"


def _as_numpy(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value, dtype="<f4", order="C")


def dumps(tensors, meta=None):
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "meta": meta or {}, "tensors": entries, "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def loads(data):
    if len(data) < 8:
        raise ParseError("checkpoint truncated before header length")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"bad checkpoint header: {exc}") from exc
    if header.get("format") != FORMAT:
        raise ParseError(f"unsupported checkpoint format {header.get('format')!r}")
    payload = data[8 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise ParseError("checkpoint payload size does not match header")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]


def save(path, tensors, meta=None):
    data = dumps(tensors, meta)
    Path(path).write_bytes(data)
    return data


def load(path):
    return loads(Path(path).read_bytes())
