"""Patch embeddings: the convolutional interaction stem and the plain
fixed-patch baseline.

Both map (B, C_in, H, W) images to (B, L, C_f) token sequences with an
additive learnable positional embedding, where L = (H/16) * (W/16). The
convolutional stem reaches /16 through four stride-2 convolutions instead of
slicing non-overlapping 16x16 patches, so neighboring patches interact before
tokenization.
"""

from __future__ import annotations

import numpy as np

from .errors import IndivisibleInputError, TokenCountMismatchError
from .functional import relu
from .layers import BatchNorm2d, Conv2d, Dropout, Module, Parameter
from .tensor import Tensor

__all__ = ["PATCH", "FieEmbedding", "PatchEmbedding", "tokens_to_map", "map_to_tokens"]

PATCH = 16  # fixed by the architecture: four stride-2 stages / one 16x16 slice


def map_to_tokens(x: Tensor) -> Tensor:
    """(B, C, h, w) feature map -> (B, h*w, C) row-major token sequence."""
    b, c, h, w = x.shape
    return x.reshape((b, c, h * w)).transpose((0, 2, 1))


def tokens_to_map(z: Tensor, hw: tuple[int, int]) -> Tensor:
    """(B, L, C) tokens -> (B, C, h, w); inverse of map_to_tokens."""
    b, l, c = z.shape
    h, w = hw
    if l != h * w:
        raise TokenCountMismatchError(f"{l} tokens cannot fill a {h}x{w} grid")
    return z.transpose((0, 2, 1)).reshape((b, c, h, w))


def _check_divisible(h: int, w: int) -> None:
    if h % PATCH or w % PATCH:
        raise IndivisibleInputError(
            f"input {h}x{w} is not divisible by the patch size {PATCH}"
        )


class FieEmbedding(Module):
    """Four-stage conv stem (stride 2 each), 1x1 projection, positional embedding.

    Each stem stage is conv -> ReLU -> BatchNorm in that order; the 1x1
    projection is conv -> BatchNorm -> ReLU. Dropout is applied after the
    projection, before tokens form, so positional addition stays exact.
    """

    def __init__(
        self,
        image_size: int,
        in_channels: int,
        embed_dim: int,
        dropout: float,
        rng: np.random.Generator,
        stem_channels: tuple[int, ...] = (64, 128, 256, 512),
        dtype=np.float32,
    ) -> None:
        super().__init__()
        _check_divisible(image_size, image_size)
        if len(stem_channels) != 4:
            raise ValueError("the stem has exactly four stride-2 stages")
        self.grid = image_size // PATCH
        widths = (in_channels,) + tuple(stem_channels)
        self.convs = [
            Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1, dtype=dtype)
            for i in range(4)
        ]
        self.bns = [BatchNorm2d(c, dtype=dtype) for c in stem_channels]
        self.proj = Conv2d(stem_channels[-1], embed_dim, 1, rng, dtype=dtype)
        self.proj_bn = BatchNorm2d(embed_dim, dtype=dtype)
        self.drop = Dropout(dropout, rng)
        self.pos_embed = Parameter(
            np.zeros((self.grid * self.grid, embed_dim), dtype=dtype)
        )

    def forward_with_stem(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (tokens Z_0, half-resolution stem feature for the decoder)."""
        _check_divisible(x.shape[2], x.shape[3])
        stem = relu(self.convs[0](x))
        z = self.bns[0](stem)
        for conv, bn in zip(self.convs[1:], self.bns[1:]):
            z = bn(relu(conv(z)))
        z = relu(self.proj_bn(self.proj(z)))
        z = self.drop(z)
        tokens = map_to_tokens(z)
        if tokens.shape[1] != self.pos_embed.shape[0]:
            raise TokenCountMismatchError(
                f"got {tokens.shape[1]} tokens, positional embedding holds "
                f"{self.pos_embed.shape[0]}"
            )
        return tokens + self.pos_embed, stem

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_stem(x)[0]

    def stem_features(self, x: Tensor) -> Tensor:
        """Post-ReLU output of the first stem conv: (B, 64, H/2, W/2).

        The lone stride-2 conv halves any even extent; only the full forward
        pass needs divisibility by 16.
        """
        return relu(self.convs[0](x))


class PatchEmbedding(Module):
    """Baseline fixed-patch linear embedding: a 16x16/16 conv plus positions."""

    def __init__(
        self,
        image_size: int,
        in_channels: int,
        embed_dim: int,
        dropout: float,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        _check_divisible(image_size, image_size)
        self.grid = image_size // PATCH
        self.proj = Conv2d(in_channels, embed_dim, PATCH, rng, stride=PATCH, dtype=dtype)
        self.drop = Dropout(dropout, rng)
        self.pos_embed = Parameter(
            np.zeros((self.grid * self.grid, embed_dim), dtype=dtype)
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_divisible(x.shape[2], x.shape[3])
        z = self.drop(self.proj(x))
        tokens = map_to_tokens(z)
        if tokens.shape[1] != self.pos_embed.shape[0]:
            raise TokenCountMismatchError(
                f"got {tokens.shape[1]} tokens, positional embedding holds "
                f"{self.pos_embed.shape[0]}"
            )
        return tokens + self.pos_embed
