"""Model assembly: configuration, the four architecture variants, parameter
accounting.

Variants select the embedding and the feed-forward family independently:
``full`` (conv-stem embedding + MEP), ``fie-only`` (conv-stem + plain MLP),
``mep-only`` (fixed-patch embedding + MEP), ``vit-baseline`` (fixed-patch +
plain MLP). Conv-stem variants feed the decoder a half-resolution stem skip;
fixed-patch variants have no such feature, so their last decoder stage
upsamples without a concat.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .decoder import Decoder
from .encoder import EncoderStack
from .errors import InvalidConfigError
from .fie import PATCH, FieEmbedding, PatchEmbedding
from .layers import Module
from .tensor import Tensor

__all__ = ["VARIANTS", "ModelConfig", "TransCC", "build_model", "count_params"]

VARIANTS = ("full", "fie-only", "mep-only", "vit-baseline")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

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

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidConfigError(
                f"variant {self.variant!r} not one of {VARIANTS}"
            )
        if self.image_size <= 0 or self.image_size % PATCH:
            raise InvalidConfigError(
                f"image_size {self.image_size} must be a positive multiple of {PATCH}"
            )
        if self.embed_dim % self.heads:
            raise InvalidConfigError(
                f"heads {self.heads} must divide embed_dim {self.embed_dim}"
            )
        if self.depth < 1:
            raise InvalidConfigError(f"depth {self.depth} must be >= 1")
        if not self.taps or list(self.taps) != sorted(set(self.taps)):
            raise InvalidConfigError(f"taps {self.taps} must be strictly increasing")
        if self.taps[-1] != self.depth:
            raise InvalidConfigError(
                f"last tap {self.taps[-1]} must be the bottleneck depth {self.depth}"
            )
        if len(self.taps) > 4:
            raise InvalidConfigError(
                f"at most 4 taps (3 skips + bottleneck), got {self.taps}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"dropout {self.dropout} must be in [0, 1)")
        if len(self.stem_channels) != 4:
            raise InvalidConfigError(
                f"stem_channels needs 4 widths, got {self.stem_channels}"
            )
        if len(self.decoder_channels) != 4:
            raise InvalidConfigError(
                f"decoder_channels needs 4 widths, got {self.decoder_channels}"
            )
        if len(self.skip_channels) < len(self.taps) - 1:
            raise InvalidConfigError(
                f"{len(self.taps) - 1} skips need as many skip_channels, "
                f"got {self.skip_channels}"
            )
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes {self.num_classes} must be >= 2")

    @property
    def grid(self) -> int:
        return self.image_size // PATCH

    @property
    def uses_fie(self) -> bool:
        return self.variant in ("full", "fie-only")

    @property
    def uses_mep(self) -> bool:
        return self.variant in ("full", "mep-only")

    def to_dict(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class TransCC(Module):
    """Embedding + encoder stack + decoder, wired per the configured variant."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32) -> None:
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        if config.uses_fie:
            self.embed: Module = FieEmbedding(
                config.image_size,
                config.in_channels,
                config.embed_dim,
                config.dropout,
                rng,
                stem_channels=config.stem_channels,
                dtype=dtype,
            )
        else:
            self.embed = PatchEmbedding(
                config.image_size,
                config.in_channels,
                config.embed_dim,
                config.dropout,
                rng,
                dtype=dtype,
            )
        self.encoder = EncoderStack(
            config.embed_dim,
            config.depth,
            config.heads,
            config.expansion,
            config.taps,
            rng,
            use_mep=config.uses_mep,
            dtype=dtype,
        )
        self.decoder = Decoder(
            config.embed_dim,
            config.decoder_channels,
            config.skip_channels,
            num_skips=len(config.taps) - 1,
            stem_in=config.stem_channels[0] if config.uses_fie else None,
            num_classes=config.num_classes,
            rng=rng,
            dtype=dtype,
        )

    def forward(self, x: Tensor) -> Tensor:
        """(B, C_in, H, W) image -> (B, num_classes, H, W) probabilities."""
        hw = (x.shape[2] // PATCH, x.shape[3] // PATCH)
        if self.config.uses_fie:
            tokens, stem = self.embed.forward_with_stem(x)
        else:
            tokens, stem = self.embed(x), None
        bottleneck, taps = self.encoder(tokens, hw)
        skip_tokens = [taps[i] for i in reversed(self.config.taps[:-1])]
        return self.decoder(bottleneck, skip_tokens, stem, hw)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TransCC:
    return TransCC(config, seed=seed, dtype=dtype)


def count_params(model: Module) -> dict[str, int]:
    """Exact parameter counts per top-level submodule plus the total."""
    counts: dict[str, int] = {}
    for name, child in model._children():
        if isinstance(child, Module):
            counts[name] = sum(p.size for _, p in child.named_parameters())
    counts["total"] = sum(p.size for _, p in model.named_parameters())
    return counts
