"""Progressive upsampling decoder with transformer-tap skip connections.

The bottleneck tokens become a (C_f, H/16, W/16) map and pass through four
stages, each doubling resolution: deconv, concat a processed skip, then a
conv block. Skips for the first three stages come from encoder taps routed
through their own deconv chains; the final stage fuses the half-resolution
conv-stem feature when the model has one. A 1x1 conv and channel softmax
produce per-pixel class probabilities.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfigError
from .fie import tokens_to_map
from .functional import relu
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import Tensor, concat, softmax

__all__ = ["ConvBlock", "SkipBranch", "Decoder"]


class ConvBlock(Module):
    """Conv 3x3 (pad 1) -> BatchNorm -> ReLU."""

    def __init__(
        self, in_channels: int, out_channels: int, rng: np.random.Generator, dtype
    ) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class SkipBranch(Module):
    """Chain of [deconv x2 -> conv block], one link per doubling to reach its stage."""

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, ...],
        rng: np.random.Generator,
        dtype,
    ) -> None:
        super().__init__()
        self.deconvs = []
        self.blocks = []
        current = in_channels
        for width in widths:
            self.deconvs.append(ConvTranspose2d(current, width, rng=rng, dtype=dtype))
            self.blocks.append(ConvBlock(width, width, rng, dtype))
            current = width

    def forward(self, x: Tensor) -> Tensor:
        for deconv, block in zip(self.deconvs, self.blocks):
            x = block(deconv(x))
        return x


class Decoder(Module):
    """Four doubling stages from the token grid back to input resolution."""

    def __init__(
        self,
        embed_dim: int,
        stage_channels: tuple[int, ...],
        skip_channels: tuple[int, ...],
        num_skips: int,
        stem_in: int | None,
        num_classes: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        if len(stage_channels) != 4:
            raise InvalidConfigError(
                f"decoder needs 4 stage widths (x16 upsampling), got {stage_channels}"
            )
        if not 0 <= num_skips <= 3 or len(skip_channels) < num_skips:
            raise InvalidConfigError(
                f"num_skips {num_skips} needs that many skip widths, got {skip_channels}"
            )
        self.num_skips = num_skips
        self.deconvs = []
        self.skips = []
        self.blocks = []
        current = embed_dim
        for i, width in enumerate(stage_channels):
            self.deconvs.append(ConvTranspose2d(current, width, rng=rng, dtype=dtype))
            fused = width
            if i < num_skips:
                # Skip for stage i needs i+1 doublings from the token grid.
                self.skips.append(
                    SkipBranch(embed_dim, tuple(skip_channels[: i + 1]), rng, dtype)
                )
                fused += skip_channels[i]
            elif i == 3 and stem_in is not None:
                fused += width
            self.blocks.append(ConvBlock(fused, width, rng, dtype))
            current = width
        self.stem_deconv = (
            ConvTranspose2d(stem_in, stage_channels[3], rng=rng, dtype=dtype)
            if stem_in is not None
            else None
        )
        self.head = Conv2d(stage_channels[3], num_classes, 1, rng, dtype=dtype)

    def forward(
        self,
        bottleneck: Tensor,
        skip_tokens: list[Tensor],
        stem: Tensor | None,
        hw: tuple[int, int],
    ) -> Tensor:
        if len(skip_tokens) != self.num_skips:
            raise InvalidConfigError(
                f"decoder built for {self.num_skips} skips, got {len(skip_tokens)}"
            )
        x = tokens_to_map(bottleneck, hw)
        for i, (deconv, block) in enumerate(zip(self.deconvs, self.blocks)):
            x = deconv(x)
            if i < self.num_skips:
                skip = self.skips[i](tokens_to_map(skip_tokens[i], hw))
                x = concat((x, skip), axis=1)
            elif i == 3 and self.stem_deconv is not None:
                x = concat((x, self.stem_deconv(stem)), axis=1)
            x = block(x)
        return softmax(self.head(x), axis=1)
