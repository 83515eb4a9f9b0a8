"""Frame files: binary PGM for single-channel frames, PPM for RGB."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "frame_{:06d}.{}"


def frame_extension(channels: int) -> str:
    if channels == 1:
        return "pgm"
    if channels == 3:
        return "ppm"
    raise ValueError(f"unsupported channel count {channels}")


def encode_frame(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8:
        raise ValueError(f"frames are stored as uint8, got {frame.dtype}")
    if frame.ndim == 3 and frame.shape[2] == 1:
        img = Image.fromarray(frame[:, :, 0], mode="L")
    elif frame.ndim == 3 and frame.shape[2] == 3:
        img = Image.fromarray(frame, mode="RGB")
    elif frame.ndim == 2:
        img = Image.fromarray(frame, mode="L")
    else:
        raise ValueError(f"bad frame shape {frame.shape}")
    buf = io.BytesIO()
    img.save(buf, format="PPM")
    return buf.getvalue()


def read_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def read_frames(seq_dir) -> np.ndarray:
    """Load every frame of a sequence directory as a (T, H, W, C) uint8 array."""
    seq_dir = Path(seq_dir)
    paths = sorted(seq_dir.glob("frame_*.p[gp]m"))
    if not paths:
        raise FileNotFoundError(f"no frames in {seq_dir}")
    return np.stack([read_frame(p) for p in paths])
