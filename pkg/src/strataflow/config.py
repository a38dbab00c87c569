"""One config file for a whole run: model, training, data, and sampler.

Keys are namespaced by section ("model.num_layers = 8"); two bare keys
(out_dir, seed) sit at the top level. The top-level seed cascades into
train.seed and data.seed unless those are pinned explicitly, so a single
line reseeds an experiment end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import textkv
from .data import DatasetSpec
from .errors import ConfigError
from .flow import SamplerConfig
from .model import ModelConfig
from .training import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DatasetSpec,
    "sampler": SamplerConfig,
}


def parse_lines(text: str) -> dict:
    """Flatten config text to {full_key: value}; later duplicates win."""
    out = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line {raw!r}")
        out[key.strip()] = val.strip()
    return out


def parse_overrides(pairs) -> dict:
    """--set key=value flags, same syntax as config lines."""
    out = {}
    for pair in pairs:
        key, sep, val = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        out[key.strip()] = val.strip()
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    out_dir: str = "run"
    seed: int = 0

    def to_text(self) -> str:
        lines = [f"out_dir = {self.out_dir}", f"seed = {self.seed}"]
        for name in _SECTIONS:
            body = textkv.to_text(getattr(self, name))
            lines += [f"{name}.{ln}" for ln in body.strip().splitlines()]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_mapping(kv: dict) -> "RunConfig":
        sections = {name: {} for name in _SECTIONS}
        out_dir, seed = "run", 0
        for key, val in kv.items():
            head, dot, rest = key.partition(".")
            if dot:
                if head not in sections or not rest:
                    raise ConfigError(f"unknown config key {key!r}")
                sections[head][rest] = val
            elif key == "out_dir":
                out_dir = val
            elif key == "seed":
                try:
                    seed = int(val)
                except ValueError:
                    raise ConfigError(f"seed must be an integer, got {val!r}") from None
            else:
                raise ConfigError(f"unknown config key {key!r}")
        for name in ("train", "data"):
            sections[name].setdefault("seed", str(seed))
        built = {}
        for name, cls in _SECTIONS.items():
            body = "\n".join(f"{k} = {v}" for k, v in sections[name].items())
            built[name] = textkv.from_text(cls, body)
        return RunConfig(out_dir=out_dir, seed=seed, **built)

    @staticmethod
    def from_text(text: str, overrides=()) -> "RunConfig":
        kv = parse_lines(text)
        kv.update(parse_overrides(overrides))
        return RunConfig.from_mapping(kv)
