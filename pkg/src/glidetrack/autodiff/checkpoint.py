"""Checkpoint file: 8-byte little-endian header length, a JSON header of named
shapes (plus free-form metadata), then the float64 little-endian values of each
parameter in header order."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..core import DataError

MAGIC = "glidetrack-ckpt-1"


def save_checkpoint(path: str | Path, params: Mapping, meta: dict | None = None) -> None:
    arrays = {k: np.asarray(getattr(v, "data", v), dtype="<f8") for k, v in params.items()}
    header = {"format": MAGIC, "params": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "model.ckpt"
    if not p.exists():
        raise DataError(f"checkpoint {p} not found")
    raw = p.read_bytes()
    if len(raw) < 8:
        raise DataError("truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as exc:
        raise DataError("corrupt checkpoint header") from exc
    if header.get("format") != MAGIC:
        raise DataError("not a glidetrack checkpoint")
    off = 8 + n
    out = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise DataError("truncated checkpoint data")
        out[entry["name"]] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise DataError("trailing bytes in checkpoint")
    return out, header.get("meta", {})
