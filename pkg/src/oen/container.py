"""Self-describing binary container shared by checkpoints, ensembles and datasets.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"OENCONT1"
    offset 8   8 bytes   uint64 header length L
    offset 16  L bytes   UTF-8 JSON header, keys sorted, no whitespace
    offset 16+L          payload: arrays back to back, C order

The header holds ``meta`` (free-form JSON), ``arrays`` (a list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the payload
start) and ``payload_sha256``. Only ``<f8`` and ``<i8`` dtypes are written.
Writing the same content twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"OENCONT1"
_PREFIX = len(MAGIC) + 8
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CorruptFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        return np.asarray(arr, dtype="<f8", order="C")
    if arr.dtype.kind in "iub":
        return np.asarray(arr, dtype="<i8", order="C")
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _canonical(arr)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"meta": meta, "arrays": entries,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def decode(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(blob) < _PREFIX:
        raise CorruptFileError("file shorter than container prefix", len(blob))
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptFileError("bad magic", 0)
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):_PREFIX])
    if _PREFIX + hlen > len(blob):
        raise CorruptFileError(f"header of {hlen} bytes runs past end of file", len(blob))
    try:
        header = json.loads(blob[_PREFIX:_PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}", _PREFIX) from None

    start = _PREFIX + hlen
    payload = blob[start:]
    expected = sum(e["nbytes"] for e in header["arrays"])
    if len(payload) != expected:
        raise CorruptFileError(
            f"payload is {len(payload)} bytes, header declares {expected}", start + min(len(payload), expected))
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFileError("payload checksum mismatch", start)

    arrays = {}
    for e in header["arrays"]:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CorruptFileError(f"unsupported dtype {e['dtype']!r} for {e['name']!r}", _PREFIX)
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(tuple(e["shape"]))
        arrays[e["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays


def write(path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(meta, arrays))


def read(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
