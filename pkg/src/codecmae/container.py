"""Named-tensor container.

Layout::

    ntc 1
    meta {"compact": "json"}
    tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
    ...
    checksum sha256 <hex digest of the payload>
    end
    <raw little-endian payload>

Offsets are relative to the start of the payload. Tensors are written in the
order given, so identical inputs always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "ntc 1"

_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("<u1"),
}


def _code_for(dtype: np.dtype) -> str:
    for code, dt in _DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return code
    raise FormatError(f"dtype {dtype} cannot be stored in a tensor container")


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))]
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        code = _code_for(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        header.append(f"tensor {name} {code} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header.append("checksum sha256 " + hashlib.sha256(payload).hexdigest())
    header.append("end")
    return ("\n".join(header) + "\n").encode("ascii") + payload


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise FormatError("not a named-tensor container")
    lines = blob[:end].decode("ascii").split("\n")
    payload = blob[end + len(b"\nend\n"):]
    meta: dict = {}
    entries = []
    digest = None
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            fields = rest.split(" ")
            if len(fields) != 5 or fields[1] not in _DTYPES:
                raise FormatError(f"bad tensor line {line!r}")
            name, code, shape, off, nbytes = fields
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            entries.append((name, code, dims, int(off), int(nbytes)))
        elif kind == "checksum":
            digest = rest.split(" ")[-1]
        else:
            raise FormatError(f"unknown manifest line {line!r}")
    if digest is None or hashlib.sha256(payload).hexdigest() != digest:
        raise FormatError("container checksum mismatch")
    tensors = {}
    for name, code, dims, off, nbytes in entries:
        dt = _DTYPES[code]
        if off + nbytes > len(payload) or nbytes != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise FormatError(f"tensor {name} extends past payload or has inconsistent size")
        tensors[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing container {path}") from exc
    return loads(blob)
