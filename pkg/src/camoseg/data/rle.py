"""COCO run-length encoding of binary masks.

Runs are taken over the column-major flattening and always start with a
(possibly empty) background run. The compressed string form stores each run,
delta-coded against the run two places earlier from the fourth run on, as
little-endian groups of 5 bits offset into printable ASCII (48 + value),
with bit 0x20 marking continuation and bit 0x10 the sign of the last group.
"""
from __future__ import annotations

import numpy as np

from ..errors import ParseError, ShapeError


def mask_to_counts(mask) -> list[int]:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    flat = (m != 0).ravel(order="F").astype(np.int8)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def counts_to_string(counts) -> str:
    out = bytearray()
    for i, c in enumerate(counts):
        x = int(c)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            ch = x & 0x1F
            x >>= 5
            more = (x != -1) if (ch & 0x10) else (x != 0)
            if more:
                ch |= 0x20
            out.append(ch + 48)
    return out.decode("ascii")


def string_to_counts(s: str | bytes) -> list[int]:
    data = s.encode("ascii") if isinstance(s, str) else bytes(s)
    counts: list[int] = []
    p = 0
    while p < len(data):
        x = 0
        k = 0
        more = True
        start = p
        while more:
            if p >= len(data):
                raise ParseError("truncated run in RLE counts", start)
            c = data[p] - 48
            if not 0 <= c < 64:
                raise ParseError(f"invalid RLE character {chr(data[p])!r}", p)
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        if x < 0:
            raise ParseError("negative run length in RLE counts", start)
        counts.append(x)
    return counts


def rle_encode(mask) -> dict:
    m = np.asarray(mask)
    counts = mask_to_counts(m)
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": counts_to_string(counts)}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts)
    counts = [int(c) for c in counts]
    if sum(counts) != h * w:
        raise ParseError(f"RLE runs cover {sum(counts)} pixels, expected {h * w}", 0)
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def rle_area(rle: dict) -> int:
    counts = rle["counts"]
    if isinstance(counts, (str, bytes)):
        counts = string_to_counts(counts)
    return int(sum(counts[1::2]))
