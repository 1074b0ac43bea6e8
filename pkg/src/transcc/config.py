"""Flat key=value run configuration shared by the CLI commands.

One namespace mirrors the model hyperparameters, phantom-generation knobs,
and training settings. Sources merge as defaults < config file < CLI flags;
unknown keys are rejected and the effective config is echoed (canonically
key-sorted) into the run directory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import PhantomConfig
from .errors import InvalidConfigError
from .model import ModelConfig

__all__ = ["RunConfig", "load_config_file", "make_run_config", "config_text"]


@dataclass(frozen=True)
class RunConfig:
    # model
    image_size: int = 224
    in_channels: int = 1
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    expansion: int = 4
    dropout: float = 0.1
    variant: str = "full"
    taps: tuple[int, ...] = (3, 6, 9, 12)
    stem_channels: tuple[int, ...] = (64, 128, 256, 512)
    decoder_channels: tuple[int, ...] = (512, 256, 128, 64)
    skip_channels: tuple[int, ...] = (512, 256, 128)
    num_classes: int = 2
    # training
    iterations: int = 900
    batch_size: int = 4
    lr: float = 0.001
    seed: int = 0
    checkpoint_every: int = 100
    # data generation
    count: int = 64
    train_fraction: float = 0.8
    vessels_min: int = 1
    vessels_max: int = 4
    width_min: float = 2.0
    width_max: float = 6.0
    contrast: float = 0.9
    noise_sigma: float = 0.03
    distractors: int = 3

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size,
            in_channels=self.in_channels,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            expansion=self.expansion,
            dropout=self.dropout,
            variant=self.variant,
            taps=self.taps,
            stem_channels=self.stem_channels,
            decoder_channels=self.decoder_channels,
            skip_channels=self.skip_channels,
            num_classes=self.num_classes,
        )

    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig(
            image_size=self.image_size,
            vessels_min=self.vessels_min,
            vessels_max=self.vessels_max,
            width_min=self.width_min,
            width_max=self.width_max,
            contrast=self.contrast,
            noise_sigma=self.noise_sigma,
            distractors=self.distractors,
            seed=self.seed,
        )


_TUPLE_KEYS = ("taps", "stem_channels", "decoder_channels", "skip_channels")
_DEFAULTS = RunConfig()
_TYPES = {f.name: type(getattr(_DEFAULTS, f.name)) for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    """Parse a raw string into the declared type of the given key."""
    if key not in _TYPES:
        raise InvalidConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if key in _TUPLE_KEYS:
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        kind = _TYPES[key]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise InvalidConfigError(f"config key {key!r}: cannot parse {raw!r}") from err


def load_config_file(path: Path) -> dict[str, object]:
    """Read ``key = value`` lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise InvalidConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def make_run_config(
    file_values: dict[str, object] | None = None,
    overrides: dict[str, object] | None = None,
) -> RunConfig:
    merged: dict[str, object] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in _TYPES:
                raise InvalidConfigError(f"unknown config key {key!r}")
            merged[key] = value
    return RunConfig(**merged)


def config_text(config: RunConfig) -> str:
    lines = []
    for key in sorted(_TYPES):
        value = getattr(config, key)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"
