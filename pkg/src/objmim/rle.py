"""Run-length codec for binary masks (COCO-style uncompressed RLE).

Counts traverse the mask in column-major pixel order and alternate runs of
zeros and ones, always starting with a zero-run (which may be 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RleMask:
    size: tuple[int, int]  # (H, W)
    counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {"size": list(self.size), "counts": list(self.counts)}

    @staticmethod
    def from_json(obj: dict) -> "RleMask":
        return RleMask(size=tuple(obj["size"]), counts=tuple(obj["counts"]))


def rle_encode(mask: np.ndarray) -> RleMask:
    """Encode a binary H x W mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected 2-d mask, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.ravel(order="F").astype(bool)
    if flat.size == 0:
        return RleMask(size=(h, w), counts=(0,))
    # Run boundaries wherever the value changes.
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs  # first count is always a zero-run
    return RleMask(size=(h, w), counts=tuple(int(r) for r in runs))


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode back to a boolean H x W mask. Rejects counts that do not sum to H*W."""
    h, w = rle.size
    counts = np.asarray(rle.counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise ValueError("negative run length")
    total = int(counts.sum())
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h * w}")
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def rle_area(rle: RleMask) -> int:
    """Number of set pixels, straight from the run lengths."""
    return int(sum(rle.counts[1::2]))
