"""Architecture hyperparameters and their canonical text form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    init_channels: int = 16
    d_state: int = 16
    expand: int = 2
    dt_rank_rule: int = 8          # dt_rank = ceil(scan channels / rule)
    cbam_reduction: int = 4
    ag_width_divisor: int = 2      # attention-gate width = max(1, skip channels // divisor)
    pmamba_fusion: str = "sum"
    input_size: int = 256
    precision: str = "float32"
    init_kernel: int = 3
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.init_channels
        if c < 2 or c % 4:
            raise ConfigurationError(f"init_channels must be a positive multiple of 4, got {c}")
        for name in ("d_state", "expand", "dt_rank_rule", "cbam_reduction", "ag_width_divisor"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.pmamba_fusion not in ("sum", "mul"):
            raise ConfigurationError(f"pmamba_fusion must be 'sum' or 'mul', got {self.pmamba_fusion!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigurationError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.init_kernel % 2 == 0:
            raise ConfigurationError("init_kernel must be odd")
        if c % self.cbam_reduction:
            raise ConfigurationError(f"cbam_reduction {self.cbam_reduction} must divide {c}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text() + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "ModelConfig":
        data = asdict(self)
        data.update(changes)
        return ModelConfig(**data)
