"""
Run configuration: one JSON file fully determines a run.

    {
      "include": "desk.json",            # optional, resolved relative to this file
      "seed": 0,
      "layout":     {"file": null},       # null -> built-in 368-taxel hand
      "simulator":  {...SimulatorConfig fields...},
      "pipeline":   {...PipelineConfig fields...},
      "encoder":    {"preset": "desk", ...EncoderConfig overrides...},
      "ssl":        {...SSLConfig fields...},
      "downstream": {...DownstreamConfig fields...},
      "paths":      {"data_dir": null, "runs_dir": null}
    }

Included files are merged section by section, the including file winning.
Any key that is not a known field raises ConfigError. The config hash covers
everything except ``paths`` so moving a run directory does not change it.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from skinssl.config import (
    DATA_DIR,
    FLUX_SCALE,
    FORCE_WINDOW_STRIDE,
    RUNS_DIR,
    SEQUENCE_STEP,
    SEQUENCE_WINDOWS,
    WINDOW_STRIDE,
    sub_seed,
)
from skinssl.downstream import DownstreamConfig
from skinssl.encoder import EncoderConfig
from skinssl.errors import ConfigError, SkinSSLError
from skinssl.hand_model import build_default_layout, load_layout
from skinssl.ssl_trainer import SSLConfig
from skinssl.synth_data import SimulatorConfig

ENCODER_PRESETS = {"tiny": EncoderConfig.tiny, "desk": EncoderConfig.desk,
                   "full": EncoderConfig.full, "default": EncoderConfig}


@dataclass
class LayoutConfig:
    file: str | None = None

    def build(self):
        return build_default_layout() if self.file is None else load_layout(self.file)


@dataclass
class PipelineConfig:
    flux_scale: float = FLUX_SCALE
    window_stride: int = WINDOW_STRIDE
    force_window_stride: int = FORCE_WINDOW_STRIDE
    sequence_windows: int = SEQUENCE_WINDOWS
    sequence_step: int = SEQUENCE_STEP

    def __post_init__(self):
        if self.flux_scale <= 0:
            raise ConfigError("pipeline.flux_scale must be positive")
        for name in ("window_stride", "force_window_stride", "sequence_windows", "sequence_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"pipeline.{name} must be at least 1")


@dataclass
class PathsConfig:
    data_dir: str | None = None
    runs_dir: str | None = None

    @property
    def data(self):
        return Path(self.data_dir) if self.data_dir else DATA_DIR

    @property
    def runs(self):
        return Path(self.runs_dir) if self.runs_dir else RUNS_DIR


SECTIONS = {
    "layout": LayoutConfig,
    "simulator": SimulatorConfig,
    "pipeline": PipelineConfig,
    "encoder": EncoderConfig,
    "ssl": SSLConfig,
    "downstream": DownstreamConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {"seed": int(data.get("seed", 0))}
        for name, section_cls in SECTIONS.items():
            kwargs[name] = _build_section(name, section_cls, dict(data.get(name) or {}))
        return cls(**kwargs)

    def to_dict(self):
        return {"seed": self.seed, **{name: asdict(getattr(self, name)) for name in SECTIONS}}

    def config_hash(self):
        data = self.to_dict()
        data.pop("paths")
        blob = json.dumps(data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def sub_seed(self, name):
        return sub_seed(self.seed, name)

    def with_seed(self, seed):
        data = self.to_dict()
        data["seed"] = int(seed)
        return RunConfig.from_dict(data)


def _build_section(name, section_cls, values):
    if name == "encoder":
        preset = values.pop("preset", "desk")
        if preset not in ENCODER_PRESETS:
            raise ConfigError(f"Unknown encoder preset {preset!r} "
                              f"(choose from {', '.join(ENCODER_PRESETS)})")
        factory = ENCODER_PRESETS[preset]
    else:
        factory = section_cls
    known = {f.name for f in fields(section_cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"Unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return factory(**values)
    except ConfigError:
        raise
    except (SkinSSLError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid [{name}] settings: {e}") from None


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_includes(path, _seen=None):
    """Read ``path`` and layer it over the file it includes, recursively."""
    path = Path(path).resolve()
    seen = _seen or []
    if path in seen:
        chain = " -> ".join(p.name for p in seen + [path])
        raise ConfigError(f"Config include cycle: {chain}")
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    include = data.pop("include", None)
    if include is None:
        return data
    base = resolve_includes(path.parent / include, seen + [path])
    return _merge(base, data)


def load_run_config(path=None, seed=None):
    """RunConfig from a JSON file (defaults when ``path`` is None); ``seed`` overrides."""
    data = resolve_includes(path) if path is not None else {}
    if seed is not None:
        data["seed"] = int(seed)
    return RunConfig.from_dict(data)
