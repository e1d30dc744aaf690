"""Binary point-cloud container "BEVPC1".

Layout (little-endian):

    magic "BEVPC1"
    u64 N, u32 F, u32 flags
    f8  points[N * F]
    i32 gt_semantic[N]        if flags & 1
    i32 gt_instance[N]        if flags & 2
    u32 D, f8 features[N * D] if flags & 4   (predicted instance features)
    u32 K, f8 logits[N * K]   if flags & 8   (semantic logits)

Round-trips preserve every field bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .scene import PointCloud

MAGIC = b"BEVPC1"

FLAG_SEMANTIC = 1
FLAG_INSTANCE = 2
FLAG_FEATURES = 4
FLAG_LOGITS = 8


def save_cloud(path, cloud: PointCloud, features: np.ndarray | None = None, logits: np.ndarray | None = None):
    n, f = cloud.points.shape
    flags = 0
    if cloud.gt_semantic is not None:
        flags |= FLAG_SEMANTIC
    if cloud.gt_instance is not None:
        flags |= FLAG_INSTANCE
    if features is not None:
        flags |= FLAG_FEATURES
    if logits is not None:
        flags |= FLAG_LOGITS
    chunks = [MAGIC, struct.pack("<QII", n, f, flags)]
    chunks.append(np.asarray(cloud.points, dtype="<f8").tobytes())
    if cloud.gt_semantic is not None:
        chunks.append(np.asarray(cloud.gt_semantic, dtype="<i4").tobytes())
    if cloud.gt_instance is not None:
        chunks.append(np.asarray(cloud.gt_instance, dtype="<i4").tobytes())
    if features is not None:
        features = np.asarray(features, dtype="<f8")
        if features.shape[0] != n:
            raise ValueError("features must have one row per point")
        chunks.append(struct.pack("<I", features.shape[1]))
        chunks.append(features.tobytes())
    if logits is not None:
        logits = np.asarray(logits, dtype="<f8")
        if logits.shape[0] != n:
            raise ValueError("logits must have one row per point")
        chunks.append(struct.pack("<I", logits.shape[1]))
        chunks.append(logits.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_cloud(path, with_extras: bool = False):
    """Read a BEVPC1 file.

    Returns the PointCloud, or ``(cloud, features, logits)`` when
    ``with_extras`` is set (absent extras come back as None).
    """
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(count: int, what: str) -> bytes:
        nonlocal pos
        if pos + count > len(buf):
            raise FormatError(f"truncated {what} at byte {pos}")
        piece = buf[pos : pos + count]
        pos += count
        return piece

    n, f, flags = struct.unpack("<QII", take(16, "header"))
    points = np.frombuffer(take(8 * n * f, "points"), dtype="<f8").reshape(n, f)
    sem = inst = features = logits = None
    if flags & FLAG_SEMANTIC:
        sem = np.frombuffer(take(4 * n, "semantic labels"), dtype="<i4").astype(np.int64)
    if flags & FLAG_INSTANCE:
        inst = np.frombuffer(take(4 * n, "instance labels"), dtype="<i4").astype(np.int64)
    if flags & FLAG_FEATURES:
        (d,) = struct.unpack("<I", take(4, "feature width"))
        features = np.frombuffer(take(8 * n * d, "features"), dtype="<f8").reshape(n, d)
    if flags & FLAG_LOGITS:
        (k,) = struct.unpack("<I", take(4, "logit width"))
        logits = np.frombuffer(take(8 * n * k, "logits"), dtype="<f8").reshape(n, k)
    if pos != len(buf):
        raise FormatError(f"trailing bytes at byte {pos}")
    cloud = PointCloud(points.astype(np.float64), sem, inst)
    if with_extras:
        return cloud, features, logits
    return cloud
