"""Experiment configuration: a flat YAML key-value document."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .network import PAD_MULTIPLE, NetConfig

# Fields that do not change what a run computes per step; left out of the
# fingerprint so a run can be resumed with a larger budget or elsewhere.
_UNHASHED = {"stage1_steps", "stage2_steps", "checkpoint", "log"}


@dataclass
class ExperimentConfig:
    r: int = 5
    n_refs: int = 3
    crop: tuple = (16, 16, 16)
    base_width: int = 8
    fusion_width: int = 8
    fusion_depth: int = 1
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    stage1_steps: int = 200
    stage2_steps: int = 100
    seed: int = 0
    relevance_fusion: bool = True
    slices_per_step: int = 0
    phantom_kind: str = "bands"
    phantom_dims: tuple = (16, 16, 16)
    phantom_seed: int = 0
    volume_path: str | None = None
    key_block: int | None = None
    max_ref_keys: int | None = None
    checkpoint: str = "runs/checkpoint"
    log: str = "runs/metrics.csv"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.crop = tuple(int(c) for c in self.crop)
        self.phantom_dims = tuple(int(c) for c in self.phantom_dims)
        self.betas = tuple(float(b) for b in self.betas)
        self.lr = float(self.lr)
        self.validate()

    def validate(self):
        dc, hc, wc = self.crop
        if self.r < 1:
            raise ConfigError("r must be >= 1")
        if (dc - 1) % self.r:
            raise ConfigError(f"crop depth {dc} incompatible with r={self.r}: need (Dc-1) % r == 0")
        if hc % PAD_MULTIPLE or wc % PAD_MULTIPLE:
            raise ConfigError(f"crop height/width must be multiples of {PAD_MULTIPLE}, got {hc}x{wc}")
        d = (dc - 1) // self.r + 1
        if not 0 <= self.n_refs <= d:
            raise ConfigError(f"n_refs={self.n_refs} must lie in [0, {d}] for crop depth {dc}")
        if any(p < c for p, c in zip(self.phantom_dims, self.crop)) and self.volume_path is None:
            raise ConfigError("phantom dims must be at least the crop size")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")

    @property
    def sparse_depth(self):
        return (self.crop[0] - 1) // self.r + 1

    def net(self):
        return NetConfig(self.base_width, self.fusion_width, self.fusion_depth,
                         self.relevance_fusion, self.key_block, self.max_ref_keys)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def fingerprint(self):
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path):
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return ExperimentConfig.from_dict(data)


def save_config(path, config):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
