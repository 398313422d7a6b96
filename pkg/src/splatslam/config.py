"""Run configuration: nested dataclasses read from a flat ``key = value`` file with dotted keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .compaction import DensifyConfig, MaskConfig
from .datasets import SyntheticSpec
from .keyframing import WindowConfig
from .mapping import MappingConfig
from .tracking import TrackingConfig

FORMATS = ("tum", "folder", "synthetic")
SECTIONS = ("mask", "window", "tracking", "mapping", "densify", "synthetic")


@dataclass
class RunConfig:
    dataset: str = ""
    dataset_format: str = "synthetic"
    output_dir: str = "runs/latest"
    seed: int = 0
    single_thread: bool = True
    max_frames: int = 0  # 0 = all frames
    # folder datasets only: fx,fy,cx,cy,width,height[,depth_scale]
    intrinsics: str = ""
    save_renders: bool = True
    mask: MaskConfig = field(default_factory=MaskConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> None:
        if self.dataset_format not in FORMATS:
            raise ValueError(f"dataset_format must be one of {FORMATS}")
        if self.dataset_format != "synthetic" and not Path(self.dataset).exists():
            raise FileNotFoundError(f"dataset path does not exist: {self.dataset!r}")
        if self.dataset_format == "folder" and not self.intrinsics:
            raise ValueError("folder datasets need 'intrinsics = fx,fy,cx,cy,width,height'")
        for name in SECTIONS:
            sub = getattr(self, name)
            if hasattr(sub, "__post_init__"):
                sub.__post_init__()

    def set(self, key: str, value: str) -> None:
        """Assign ``value`` (text) to a dotted key such as ``mask.lambda2``."""
        target, attr = self, key
        if "." in key:
            section, attr = key.split(".", 1)
            if section not in SECTIONS:
                raise KeyError(f"unknown config section {section!r}")
            target = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if attr not in fields or attr in SECTIONS and target is self:
            raise KeyError(f"unknown config key {key!r}")
        setattr(target, attr, _coerce(getattr(target, attr), value))

    def items(self):
        """Flat (dotted key, value) pairs for every knob."""
        for f in dataclasses.fields(self):
            if f.name in SECTIONS:
                for g in dataclasses.fields(getattr(self, f.name)):
                    yield f"{f.name}.{g.name}", getattr(getattr(self, f.name), g.name)
            else:
                yield f.name, getattr(self, f.name)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> RunConfig:
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, value)
            except (KeyError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
        for key, value in overrides.items():
            cfg.set(key, str(value))
        cfg.mapping.seed = cfg.seed
        return cfg

    @classmethod
    def from_file(cls, path, **overrides) -> RunConfig:
        cfg = cls.from_text(Path(path).read_text(), **overrides)
        if cfg.dataset and not Path(cfg.dataset).is_absolute():
            candidate = Path(path).parent / cfg.dataset
            if candidate.exists():
                cfg.dataset = str(candidate)
        cfg.validate()
        return cfg


def _coerce(current, text: str):
    if isinstance(current, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.split(","))
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return str(value)
