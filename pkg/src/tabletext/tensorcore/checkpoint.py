"""Binary checkpoint container with bit-exact round-trips.

Layout (all integers little-endian):
  magic   8 bytes  b"TTXCKPT" + format version byte
  header  uint32 length + UTF-8 JSON (format_version, config_digest, config,
          scenario, plus whatever the writer adds)
  count   uint32 number of parameters
  entry   uint16 name length + name bytes, uint8 ndim, uint64 dims,
          float64 values
  adam    uint8 flag; when 1, per parameter in the same order:
          uint64 step + float64 m values + float64 v values
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .params import ParamStore

MAGIC = b"TTXCKPT"
FORMAT_VERSION = 1


def config_digest(config: Dict) -> str:
    """sha256 over canonical key=value lines of a flat config mapping."""
    import hashlib

    lines = [f"{k}={config[k]}" for k in sorted(config)]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _take(fh, 1))
    shape = struct.unpack(f"<{ndim}Q", _take(fh, 8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_take(fh, 8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def _take(fh, n: int) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise ValueError("truncated checkpoint file")
    return chunk


def save_checkpoint(
    path,
    store: ParamStore,
    header: Dict,
    with_adam: bool = False,
) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(store)))
        for name, p in store.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            _write_array(fh, p.data)
        fh.write(struct.pack("<B", 1 if with_adam else 0))
        if with_adam:
            for _, p in store.items():
                fh.write(struct.pack("<Q", p.step))
                _write_array(fh, p.m)
                _write_array(fh, p.v)


def load_checkpoint(path) -> Tuple[Dict, Dict[str, np.ndarray], Optional[Dict]]:
    """Returns (header, {name: value}, adam state or None)."""
    with open(path, "rb") as fh:
        magic = _take(fh, 8)
        if magic[:7] != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = magic[7]
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        (blob_len,) = struct.unpack("<I", _take(fh, 4))
        header = json.loads(_take(fh, blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _take(fh, 4))
        values: Dict[str, np.ndarray] = {}
        order = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _take(fh, 2))
            name = _take(fh, name_len).decode("utf-8")
            values[name] = _read_array(fh)
            order.append(name)
        (adam_flag,) = struct.unpack("<B", _take(fh, 1))
        adam = None
        if adam_flag:
            adam = {}
            for name in order:
                (step,) = struct.unpack("<Q", _take(fh, 8))
                m = _read_array(fh)
                v = _read_array(fh)
                adam[name] = {"step": step, "m": m, "v": v}
    return header, values, adam
