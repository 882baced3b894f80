"""Training configuration and its flat ``key = value`` text format.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Booleans accept true/false/yes/no/1/0; tuples are comma-separated. Keys not
present keep their defaults; unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

GEOMETRY_MODES = ("nerf-opacity", "cost-volume", "gt-depth", "none")
SAMPLE_SOURCES = ("image", "volume")
FEATURE_SETS = ("avg", "avg+var", "avg+var+rgb")


@dataclass
class TrainConfig:
    # optimisation
    learning_rate: float = 0.0002
    weight_decay: float = 0.0001
    iterations: int = 3000
    lr_milestones: Tuple[float, ...] = (2 / 3, 11 / 12)
    lr_gamma: float = 0.1
    grad_clip: float = 0.0
    # radiance branch
    rays_per_iter: int = 2048
    n_novel_views: int = 10
    n_samples: int = 64
    near: float = 0.2
    far: float = 8.0
    sampling: str = "stratified"
    ray_interp: str = "bilinear"
    pe_freqs: int = 10
    max_empty_points: int = 8
    # grid
    grid_nx: int = 24
    grid_ny: int = 24
    grid_nz: int = 12
    # network sizes
    channels: int = 32
    mlp_hidden: int = 256
    n_classes: int = 3
    neck_layers: int = 0
    neck_channels: int = 32
    cost_hidden: int = 16
    # toggles
    feature_set: str = "avg+var+rgb"
    photo_loss: bool = True
    depth_loss: bool = True
    sample_source: str = "image"
    share_gmlp: bool = True
    detection_branch: bool = True
    geometry: str = "nerf-opacity"
    modulate: str = "avg"
    rgb_resolution: str = "full"
    # scenes
    n_train_scenes: int = 32
    n_eval_scenes: int = 8
    n_source_views: int = 12
    image_width: int = 64
    image_height: int = 48
    focal: float = 32.0
    shading: bool = False
    # evaluation
    score_thresh: float = 0.05
    nms_iou: float = 0.25
    psnr_cap: float = 99.0
    eval_chunk: int = 16384
    # reproducibility
    seed: int = 0
    scene_seed: Optional[int] = None
    ray_seed: Optional[int] = None
    init_seed: Optional[int] = None
    deterministic: bool = True
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("learning_rate", "iterations", "rays_per_iter", "n_novel_views", "n_samples",
                    "near", "far", "grid_nx", "grid_ny", "grid_nz", "channels", "mlp_hidden",
                    "n_classes", "pe_freqs", "n_train_scenes", "n_source_views", "image_width",
                    "image_height", "focal")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.near >= self.far:
            raise ValueError("near must be smaller than far")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.geometry not in GEOMETRY_MODES:
            raise ValueError(f"geometry must be one of {GEOMETRY_MODES}")
        if self.sample_source not in SAMPLE_SOURCES:
            raise ValueError(f"sample_source must be one of {SAMPLE_SOURCES}")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"feature_set must be one of {FEATURE_SETS}")
        if self.modulate not in ("avg", "avg+var"):
            raise ValueError("modulate must be 'avg' or 'avg+var'")
        if self.image_width % 4 or self.image_height % 4:
            raise ValueError("image size must be a multiple of 4")
        if not self.detection_branch and not (self.photo_loss or self.depth_loss):
            raise ValueError("nothing to train: detection branch and both NeRF losses are off")

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return (self.grid_nx, self.grid_ny, self.grid_nz)

    @property
    def nerf_enabled(self) -> bool:
        """The radiance branch only exists in opacity mode (the other modes are baselines)."""
        return self.geometry == "nerf-opacity" and (self.photo_loss or self.depth_loss)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def stream_seed(self, name: str) -> int:
        """Seed of the named RNG stream (``scene``, ``ray`` or ``init``).

        Streams default to independent values derived from ``seed`` and can
        be pinned individually.
        """
        override = getattr(self, f"{name}_seed")
        if override is not None:
            return int(override)
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(value, hints[key], key)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse(value: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        low = value.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if origin is tuple:
        return tuple(float(x) for x in value.split(",") if x.strip())
    if hint is int:
        return int(value)
    if hint is float:
        return float(value)
    return value
