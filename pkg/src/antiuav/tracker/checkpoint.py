"""Byte-deterministic checkpoint container.

Layout: the magic line ``ANTIUAV-CKPT 1\\n``, an 8-byte little-endian header
length, a sorted-key JSON header (tracker config, metadata and one entry per
tensor with dtype, shape and byte offset), then the raw little-endian tensor
bytes in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import QueryGuidedTracker, TrackerConfig

MAGIC = b"ANTIUAV-CKPT 1\n"


def checkpoint_bytes(model: QueryGuidedTracker, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<")))
        data = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {"config": model.cfg.to_dict(), "meta": meta or {}, "tensors": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path, model: QueryGuidedTracker, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_checkpoint(path) -> tuple[QueryGuidedTracker, dict]:
    """Rebuild the model; returns ``(model, meta)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not an antiuav checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    model = QueryGuidedTracker(TrackerConfig(**header["config"]))
    state = {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    if state:
        model.to(next(iter(state.values())).dtype)
    return model, header["meta"]
