"""Transformer encoder: pre-norm multi-head self-attention blocks paired with
either the locality-enhanced MEP feed-forward or a plain MLP feed-forward.

The MEP block reshapes its hidden activations back onto the token grid and
runs a depthwise 3x3 convolution there, so spatially adjacent tokens exchange
information inside the feed-forward path. Intermediate block outputs at the
configured tap depths are exposed for decoder skip connections.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidConfigError
from .fie import map_to_tokens, tokens_to_map
from .functional import gelu
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor, matmul, softmax

__all__ = ["MsaBlock", "MepBlock", "FeedForwardBlock", "EncoderStack"]


class MsaBlock(Module):
    """z + MSA(LayerNorm(z)); attention is softmax(q k^T / sqrt(C_n)) v per head."""

    def __init__(
        self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32
    ) -> None:
        super().__init__()
        if dim % heads:
            raise InvalidConfigError(f"heads {heads} must divide embed dim {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.norm = LayerNorm(dim, dtype=dtype)
        self.q_proj = Linear(dim, dim, rng, dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, l, _ = x.shape
        return x.reshape((b, l, self.heads, self.head_dim)).transpose((0, 2, 1, 3))

    def _attend(self, normed: Tensor) -> tuple[Tensor, Tensor]:
        b, l, c = normed.shape
        q = self._split_heads(self.q_proj(normed))
        k = self._split_heads(self.k_proj(normed))
        v = self._split_heads(self.v_proj(normed))
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * scale
        attn = softmax(scores, axis=-1)
        context = matmul(attn, v)
        merged = context.transpose((0, 2, 1, 3)).reshape((b, l, c))
        return merged, attn

    def forward(self, z: Tensor) -> Tensor:
        merged, _ = self._attend(self.norm(z))
        return self.out_proj(merged) + z

    def attention_probs(self, z: Tensor) -> Tensor:
        """(B, heads, L, L) attention rows for inspection; recomputed."""
        return self._attend(self.norm(z))[1]


class MepBlock(Module):
    """Locality-enhanced feed-forward.

    z + Linear2(flatten(GELU(BN(DwConv(grid(GELU(Linear1(LN(z))))))))), where
    grid() lays the widened tokens back on the (H/16, W/16) map.
    """

    def __init__(
        self, dim: int, expansion: int, rng: np.random.Generator, dtype=np.float32
    ) -> None:
        super().__init__()
        hidden = dim * expansion
        self.norm = LayerNorm(dim, dtype=dtype)
        self.linear1 = Linear(dim, hidden, rng, dtype=dtype)
        self.dwconv = Conv2d(
            hidden, hidden, 3, rng, stride=1, padding=1, groups=hidden, dtype=dtype
        )
        self.bn = BatchNorm2d(hidden, dtype=dtype)
        self.linear2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, z: Tensor, hw: tuple[int, int]) -> Tensor:
        widened = gelu(self.linear1(self.norm(z)))
        grid = tokens_to_map(widened, hw)
        local = gelu(self.bn(self.dwconv(grid)))
        return self.linear2(map_to_tokens(local)) + z


class FeedForwardBlock(Module):
    """Plain pre-norm MLP: z + Linear2(GELU(Linear1(LN(z)))).

    Same widths as MepBlock minus the depthwise conv and batch norm, so the
    parameter delta between the two is exactly those two layers.
    """

    def __init__(
        self, dim: int, expansion: int, rng: np.random.Generator, dtype=np.float32
    ) -> None:
        super().__init__()
        hidden = dim * expansion
        self.norm = LayerNorm(dim, dtype=dtype)
        self.linear1 = Linear(dim, hidden, rng, dtype=dtype)
        self.linear2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, z: Tensor, hw: tuple[int, int] | None = None) -> Tensor:
        return self.linear2(gelu(self.linear1(self.norm(z)))) + z


class EncoderStack(Module):
    """depth x (MSA block, feed-forward block) with tapped intermediate outputs."""

    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        expansion: int,
        taps: tuple[int, ...],
        rng: np.random.Generator,
        use_mep: bool = True,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        if not taps or list(taps) != sorted(set(taps)) or taps[-1] > depth or taps[0] < 1:
            raise InvalidConfigError(
                f"taps {taps} must be strictly increasing in [1, depth={depth}]"
            )
        self.taps = tuple(taps)
        self.attn_blocks = [MsaBlock(dim, heads, rng, dtype=dtype) for _ in range(depth)]
        ff = MepBlock if use_mep else FeedForwardBlock
        self.ff_blocks = [ff(dim, expansion, rng, dtype=dtype) for _ in range(depth)]

    def forward(
        self, z: Tensor, hw: tuple[int, int]
    ) -> tuple[Tensor, dict[int, Tensor]]:
        taps: dict[int, Tensor] = {}
        for i, (attn, ff) in enumerate(zip(self.attn_blocks, self.ff_blocks), start=1):
            z = ff(attn(z), hw)
            if i in self.taps:
                taps[i] = z
        return z, taps
