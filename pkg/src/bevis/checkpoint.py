"""Versioned binary container for named float64 arrays.

Layout (all integers little-endian):

    magic "BEVIS1"
    repeated to EOF:
        u32  name length
        ...  name (utf-8)
        u32  rank
        u64  dims[rank]
        f8   values (row-major, little-endian)

Round-trips are bit-exact; parse errors name the failing byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"BEVIS1"


def save_arrays(path, arrays: dict[str, np.ndarray]):
    path = Path(path)
    chunks = [MAGIC]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() yields C order for any layout
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    path.write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what} at byte {pos}")
        piece = buf[pos : pos + n]
        pos += n
        return piece

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count, f"payload of {name!r}"), dtype="<f8")
        out[name] = data.reshape(dims).astype(np.float64)
    return out
