"""Binary parameter checkpoints.

Layout::

    b"CSCK"                      magic
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON
    payload                      concatenated little-endian float64 arrays

The header holds ``{"version", "params": [{"name", "shape", "offset"}], "meta"}``
where ``offset`` counts bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

MAGIC = b"CSCK"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: Union[str, Path],
    params: Mapping[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    arrays = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype=_LE_F64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        arrays.append(arr)
    header = json.dumps(
        {"version": FORMAT_VERSION, "params": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen :]
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=entry["offset"])
        params[entry["name"]] = arr.astype(np.float64).reshape(shape)
    return params, header.get("meta", {})
