"""Run-length encoding of binary masks, COCO uncompressed convention.

Counts are column-major and start with the number of unset pixels, so a mask
whose first pixel is set begins with a zero count. Round-trips are bit-exact.
"""
from __future__ import annotations

import numpy as np

__all__ = ["encode", "decode"]


def encode(mask: np.ndarray) -> dict:
    """Encode a 2-D boolean array as {"size": [h, w], "counts": [...]}."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.ravel(order="F")
    if flat.size == 0:
        return {"size": [h, w], "counts": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [h, w], "counts": counts}


def decode(rle: dict) -> np.ndarray:
    """Decode to a 2-D boolean array; validates the counts sum."""
    h, w = (int(v) for v in rle["size"])
    counts = [int(c) for c in rle["counts"]]
    if any(c < 0 for c in counts):
        raise ValueError("negative run length")
    total = sum(counts)
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h * w} for size {h}x{w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in counts:
        if value:
            flat[pos:pos + c] = True
        pos += c
        value = not value
    return flat.reshape((h, w), order="F")
