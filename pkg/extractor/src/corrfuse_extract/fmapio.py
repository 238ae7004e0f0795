"""Standalone FMAP writer/reader.

This is an independent implementation of the FMAP wire format (the
interchange contract with the corrfuse consumer), kept free of any
import on the consumer package:

``"FMAP" | version:u32=1 LE | H:u32 | W:u32 | C:u32 | meta_len:u32 |
meta UTF-8 JSON | payload H*W*C float32 LE, row-major, channel-last``

Meta JSON carries ``source_image_width``, ``source_image_height``,
``model_tag`` and a string-to-string ``extraction_params`` map.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def meta_json(
    source_image_width: int,
    source_image_height: int,
    model_tag: str,
    extraction_params: dict[str, str],
) -> str:
    return json.dumps(
        {
            "source_image_width": int(source_image_width),
            "source_image_height": int(source_image_height),
            "model_tag": model_tag,
            "extraction_params": dict(sorted(extraction_params.items())),
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def write_fmap_atomic(data: np.ndarray, meta: str, path) -> None:
    """Write an (H, W, C) float32 grid; temp file + rename so readers never
    observe a partial file."""
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 3:
        raise ValueError(f"expected (H, W, C) grid, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite feature values")
    h, w, c = data.shape
    meta_bytes = meta.encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, h, w, c, len(meta_bytes)))
            fh.write(meta_bytes)
            fh.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_fmap(path) -> tuple[np.ndarray, dict]:
    """Read back (data, meta dict); used by this package's own tests."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: too short for an FMAP header")
    magic, version, h, w, c, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path}: bad magic/version {magic!r}/{version}")
    meta = json.loads(raw[_HEADER.size : _HEADER.size + meta_len].decode("utf-8"))
    payload = raw[_HEADER.size + meta_len :]
    if len(payload) != h * w * c * 4:
        raise ValueError(f"{path}: payload length mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return data, meta
