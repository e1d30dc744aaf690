"""Plain-text key=value configuration with include support.

Lines are ``key = value`` (whitespace optional), ``#`` starts a comment and
``include other.cfg`` splices another file relative to the current one.
Every field below documents its default; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class PipelineConfig:
    seed: int = 0

    # synthetic dataset
    n_scenes: int = 40
    room_min: float = 4.2  # uniform range for room width/depth (m)
    room_max: float = 5.4
    room_height: float = 2.8
    objects_min: int = 3
    objects_max: int = 8
    density: float = 110.0  # points per square meter
    ceiling: bool = False  # ceilings are invisible from above; off by default

    # bird's-eye view
    cell_size: float = 0.05  # meters per pixel (0.03 also supported)
    ceiling_fraction: float = 0.9
    max_grid: int = 4096
    pad_multiple: int = 16

    # 2d instance network and pair loss
    embed_dim: int = 8
    unet_widths: tuple = (16, 32, 64, 128)
    delta_var: float = 0.5
    delta_dist: float = 1.5
    samples_per_instance: int = 100
    steps_2d: int = 900
    batch_size_2d: int = 1
    augment: bool = True
    scale_min: float = 0.9
    scale_max: float = 1.1
    lr: float = 1e-3
    lr_decay_rate: float = 0.7
    lr_decay_interval: int = 5000
    eval_every: int = 60
    patience: int = 6

    # 3d propagation network
    knn_k: int = 20
    edge_widths: tuple = (64, 64, 64)
    block_diameter: float = 1.0  # 1.5 also supported
    block_points: int = 1024
    steps_3d: int = 1200
    val_blocks: int = 12

    # grouping
    bandwidth: float = 1.0  # (delta_var + delta_dist) / 2
    merge_radius: float = 0.5
    ms_max_iters: int = 100
    ms_tol: float = 1e-3
    alpha: float = 0.25

    # evaluation gates; when > 0 the eval command exits nonzero if unmet
    min_ap50: float = 0.0
    min_miou: float = 0.0

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_mapping(read_kv_file(path))

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "PipelineConfig":
        typed = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in by_name:
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            typed[key] = _coerce(raw, default, key)
        return cls(**typed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(raw: str, default, key: str):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def read_kv_file(path) -> dict[str, str]:
    path = Path(path)
    out: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("include "):
            target = stripped.split(None, 1)[1].strip()
            out.update(read_kv_file(path.parent / target))
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out
