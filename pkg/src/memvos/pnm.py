"""Binary PNM image files: P6 color frames and P5 mask maps.

Frames travel as 8-bit RGB PPM (P6); masks travel as 8-bit PGM (P5)
whose pixel value is the object id itself (0 background, 1 first
object, ...), with maxval pinned to 255 so ids stay readable in any
viewer. Clips on disk are directories of zero-padded numbered files:
``frame_000.ppm`` ... and ``mask_000.pgm`` ...
"""

from __future__ import annotations

import os
import re
from typing import List, Tuple

import numpy as np


def _read_header(fh, magic: bytes) -> Tuple[int, int, int]:
    """Parse 'Pn <w> <h> <maxval>' allowing comments and any whitespace."""
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")

    def next_token() -> int:
        tok = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError("truncated header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if tok:
                    break
                continue
            tok += ch
        return int(tok)

    w, h, maxval = next_token(), next_token(), next_token()
    return w, h, maxval


def write_frame(path: str, frame: np.ndarray) -> None:
    """[3, H, W] floats in [0, 1] -> binary P6."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"expected [3, H, W], got {frame.shape}")
    _, h, w = frame.shape
    data = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_frame(path: str) -> np.ndarray:
    """binary P6 -> [3, H, W] floats in [0, 1]."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
        raw = fh.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_mask(path: str, mask: np.ndarray) -> None:
    """[H, W] small integer ids -> binary P5 with the id as pixel value."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected [H, W], got {mask.shape}")
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask ids must fit a byte")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(mask.astype(np.uint8).tobytes())


def read_mask(path: str) -> np.ndarray:
    """binary P5 -> [H, W] uint8 object ids."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def frame_name(index: int) -> str:
    return f"frame_{index:03d}.ppm"


def mask_name(index: int) -> str:
    return f"mask_{index:03d}.pgm"


def write_clip(directory: str, frames: np.ndarray, masks: np.ndarray | None = None) -> None:
    """Write a [T, 3, H, W] clip (and optionally [T, H, W] masks) as numbered files."""
    os.makedirs(directory, exist_ok=True)
    for t in range(frames.shape[0]):
        write_frame(os.path.join(directory, frame_name(t)), frames[t])
    if masks is not None:
        for t in range(masks.shape[0]):
            write_mask(os.path.join(directory, mask_name(t)), masks[t])


def read_clip_frames(directory: str) -> np.ndarray:
    """Load every frame_*.ppm in numeric order into [T, 3, H, W]."""
    pat = re.compile(r"frame_(\d+)\.ppm$")
    found = sorted(
        (int(m.group(1)), os.path.join(directory, f))
        for f in os.listdir(directory)
        if (m := pat.match(f))
    )
    if not found:
        raise FileNotFoundError(f"no frame_*.ppm files in {directory}")
    indices = [i for i, _ in found]
    if indices != list(range(len(indices))):
        raise ValueError(f"{directory}: frame numbering has gaps: {indices[:6]}...")
    return np.stack([read_frame(p) for _, p in found])
