"""
Run configuration for RefPaint.

A run is described by one JSON document with the sections below. Every
section maps onto a dataclass; unknown keys are rejected so typos surface
immediately instead of silently falling back to defaults.

Example document::

    {
      "schedule": {"steps": 200},
      "model": {"resolution": 32, "base_channels": 32},
      "masks": {"min_coverage": 0.1, "max_coverage": 0.5},
      "train": {"steps": 2000, "batch": 8, "seed": 0},
      "data": {"source": "procedural", "n": 512},
      "output_dir": "runs/toy"
    }
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from errors import ConfigurationError, ParameterError

T = TypeVar("T")


def _from_dict(cls: Type[T], data: Optional[Dict[str, Any]], section: str) -> T:
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid '{section}' section: {e}") from e


def _to_dict(obj: Any) -> Dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Noise schedule settings.

    With ``rescale`` the beta endpoints are multiplied by 1000/steps, which
    keeps the terminal noise level close to 1 for short schedules.
    """

    kind: str = "linear"
    steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    rescale: bool = True

    def __post_init__(self):
        if self.kind != "linear":
            raise ParameterError(f"schedule kind must be 'linear', got {self.kind!r}")
        if not isinstance(self.steps, int) or self.steps < 2:
            raise ParameterError("schedule steps must be an integer >= 2")

    def endpoints(self) -> Tuple[float, float]:
        """Effective (beta_min, beta_max) after optional rescaling."""
        scale = 1000.0 / self.steps if self.rescale else 1.0
        return self.beta_min * scale, self.beta_max * scale

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ScheduleConfig":
        return _from_dict(cls, data, "schedule")

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)


@dataclass(frozen=True)
class DenoiserConfig:
    """
    Shape of the conditional UNet, its ladder-side encoder and the patch embedder.

    The two ``enable_*`` flags are independent ablation switches.
    ``fusion_mask_invert`` flips the polarity of the mask used inside the
    fusion blocks.
    """

    resolution: int = 32
    base_channels: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    attn_levels: Tuple[int, ...] = (1, 2)
    embed_dim: int = 64
    patch_size: int = 8
    image_channels: int = 3
    enable_ladder_side: bool = True
    enable_mask_fusion: bool = True
    fusion_mask_invert: bool = False
    token_threshold: float = 0.5
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("resolution", "base_channels", "levels", "blocks_per_level",
                     "embed_dim", "patch_size", "image_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.resolution % (2 ** (self.levels - 1)) != 0:
            raise ParameterError(
                f"resolution {self.resolution} must be divisible by 2^(levels-1) = {2 ** (self.levels - 1)}")
        if self.resolution % self.patch_size != 0:
            raise ParameterError(f"patch_size {self.patch_size} must divide resolution {self.resolution}")
        bad = [lv for lv in self.attn_levels if not 0 <= lv < self.levels]
        if bad:
            raise ParameterError(f"attn_levels {bad} outside [0, {self.levels})")
        if not 0.0 <= self.token_threshold <= 1.0:
            raise ParameterError("token_threshold must be in [0, 1]")

    def channels(self, level: int) -> int:
        """Feature width at ``level``: base at level 0, doubled below it."""
        return self.base_channels * (1 if level == 0 else 2)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "DenoiserConfig":
        return _from_dict(cls, data, "model")

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)


@dataclass(frozen=True)
class StrokeParams:
    """
    Free-form mask generator settings.

    Widths and lengths are given for a ``reference_size`` square grid and
    scale linearly with the actual mask height. Coverage is the hole
    fraction (share of pixels equal to 0).
    """

    min_strokes: int = 1
    max_strokes: int = 4
    min_width: float = 2.0
    max_width: float = 6.0
    min_vertices: int = 3
    max_vertices: int = 8
    max_angle_step: float = math.pi / 2
    min_length: float = 3.0
    max_length: float = 10.0
    min_coverage: float = 0.1
    max_coverage: float = 0.5
    max_retries: int = 100
    reference_size: int = 32

    def __post_init__(self):
        if not 0 <= self.min_strokes <= self.max_strokes:
            raise ParameterError("stroke count range must satisfy 0 <= min <= max")
        if not 0 < self.min_width <= self.max_width:
            raise ParameterError("stroke width range must satisfy 0 < min <= max")
        if not 1 <= self.min_vertices <= self.max_vertices:
            raise ParameterError("vertex count range must satisfy 1 <= min <= max")
        if not 0 <= self.min_length <= self.max_length:
            raise ParameterError("segment length range must satisfy 0 <= min <= max")
        if self.max_angle_step < 0:
            raise ParameterError("max_angle_step must be non-negative")
        if not 0.0 <= self.min_coverage <= self.max_coverage <= 1.0:
            raise ParameterError("coverage band must satisfy 0 <= min <= max <= 1")
        if self.max_retries < 1 or self.reference_size < 1:
            raise ParameterError("max_retries and reference_size must be positive")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "StrokeParams":
        return _from_dict(cls, data, "masks")

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)


@dataclass(frozen=True)
class TrainConfig:
    """
    Training loop settings.

    ``steps`` counts calls to ``train_step``; the optimizer updates every
    ``grad_accum`` calls. ``num_workers`` = 1 is the strict single-threaded
    mode used for reproducibility checks.
    """

    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    grad_accum: int = 4
    p_drop: float = 0.1
    p_full_hole: float = 0.25
    seed: int = 0
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    log_every: int = 50
    checkpoint_every: int = 0
    num_workers: int = 1
    fit_pca: bool = True
    pca_rank: Optional[int] = None
    pca_variance: float = 0.9
    progress: bool = False

    def __post_init__(self):
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ParameterError("steps must be a non-negative integer")
        for name in ("batch", "grad_accum", "log_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ParameterError(f"{name} must be a positive integer")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ParameterError("lr must be positive and weight_decay non-negative")
        for name in ("p_drop", "p_full_hole", "pca_variance"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1]")
        if self.checkpoint_every < 0 or self.num_workers < 0:
            raise ParameterError("checkpoint_every and num_workers must be non-negative")
        if self.pca_rank is not None and self.pca_rank < 1:
            raise ParameterError("pca_rank must be positive when given")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "TrainConfig":
        return _from_dict(cls, data, "train")

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)


@dataclass(frozen=True)
class DataConfig:
    """Where training images come from: the procedural corpus or a directory."""

    source: str = "procedural"
    path: Optional[str] = None
    n: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("procedural", "dir"):
            raise ParameterError("data source must be 'procedural' or 'dir'")
        if self.source == "dir" and not self.path:
            raise ParameterError("data source 'dir' requires a path")
        if self.n < 1:
            raise ParameterError("n must be >= 1")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "DataConfig":
        return _from_dict(cls, data, "data")

    def to_dict(self) -> Dict[str, Any]:
        return _to_dict(self)


_SECTIONS = {
    "schedule": ScheduleConfig,
    "model": DenoiserConfig,
    "masks": StrokeParams,
    "train": TrainConfig,
    "data": DataConfig,
}
_SCALARS = ("output_dir", "metrics_file", "checkpoint_name", "resume_from")


@dataclass(frozen=True)
class RunConfig:
    """The whole JSON document."""

    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    masks: StrokeParams = field(default_factory=StrokeParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/refpaint"
    metrics_file: str = "metrics.txt"
    checkpoint_name: str = "model.rfpt"
    resume_from: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config document must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS))
        if unknown:
            raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
        kwargs: Dict[str, Any] = {name: section.from_dict(data.get(name))
                                  for name, section in _SECTIONS.items()}
        for name in _SCALARS:
            if name in data:
                kwargs[name] = data[name]
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {name: getattr(self, name).to_dict() for name in _SECTIONS}
        for name in _SCALARS:
            out[name] = getattr(self, name)
        return out


def load_run_config(path: str | Path) -> RunConfig:
    """
    Read a run config from JSON.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigurationError: If the JSON is corrupt or violates the schema.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(payload)
