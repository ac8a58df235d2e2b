"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"RIGCKPT\\0"
    version    u32
    header     u32 length + UTF-8 JSON (kind, config, anything else)
    count      u32 number of arrays
    per array: u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
               prod(dims) x f64 values (C order)

Arrays are written in sorted-name order and the header JSON with sorted keys,
so saving what was loaded reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RIGCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(header: dict, arrays: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += [struct.pack("<I", len(hjson)), hjson, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.array(arrays[name], dtype="<f8", order="C")
        bname = name.encode("utf-8")
        out.append(struct.pack("<H", len(bname)) + bname + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def loads(data: bytes) -> tuple[dict, dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos: pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last array")
    return header, arrays


def save(path, header: dict, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(header, arrays))


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def prefixed(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def strip_prefix(prefix: str, arrays: dict) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
