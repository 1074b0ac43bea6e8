"""Central finite-difference gradient checking.

Each named check builds a double-precision scalar-valued computation, runs one
tape backward for analytic gradients, then compares against central
differences (f(x+h) - f(x-h)) / 2h. The reported error is relative to the
overall gradient scale of the check:

    max_i |analytic_i - numeric_i| / max(max_i max(|analytic_i|, |numeric_i|), 1e-12)

which keeps near-zero coordinates from amplifying the f64 finite-difference
noise floor (~1e-10 absolute for O(1) losses).

Networks with ReLU-family kinks make individual measurements unreliable when
the probed interval [x-h, x+h] happens to straddle a kink: the central
difference then reports the average of two different slopes, an O(1) error
that does not shrink with h. Such measurements are detected by the symmetric
second difference |f(x+h) - 2 f(x) + f(x-h)| / 2h, which bounds the resulting
derivative error (it is ~|f''| h / 2 at smooth points but jumps to the slope
discontinuity at a crossing), and are excluded from the comparison. The
filter never inspects the analytic/numeric mismatch itself, so a wrong
gradient rule cannot hide behind it; a check additionally fails outright if
fewer than half of its measurements survive.

Large networks are checked on a per-tensor coordinate subsample plus random
directional derivatives over the full parameter vector; per-layer checks
cover every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .encoder import FeedForwardBlock, MepBlock, MsaBlock
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear
from .metrics import bce_loss
from .tensor import Tape, Tensor, concat, matmul, softmax, sqrt

__all__ = ["CheckResult", "run_check", "op_checks", "block_checks", "model_check", "run_suite"]

_H = 1e-5
_TINY = 1e-12


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass(frozen=True)
class Check:
    name: str
    make: Callable  # make(rng) -> (forward: () -> Tensor scalar, tensors: list[Tensor])
    tolerance: float = 1e-4


def _loss_value(forward: Callable) -> float:
    return float(forward().data)


def finite_difference(
    forward: Callable, array: np.ndarray, coords: Sequence[int], h: float = _H
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the scalar loss at the given flat coordinates.

    Returns ``(derivatives, residuals)``; ``residuals[j]`` is the symmetric
    second difference scaled to derivative units (see module docstring), an
    upper bound on the derivative error caused by a kink inside the interval.
    """
    flat = array.reshape(-1)
    center = _loss_value(forward)
    out = np.empty(len(coords), dtype=np.float64)
    residuals = np.empty(len(coords), dtype=np.float64)
    for j, idx in enumerate(coords):
        original = flat[idx]
        flat[idx] = original + h
        plus = _loss_value(forward)
        flat[idx] = original - h
        minus = _loss_value(forward)
        flat[idx] = original
        out[j] = (plus - minus) / (2.0 * h)
        residuals[j] = abs(plus - 2.0 * center + minus) / (2.0 * h)
    return out, residuals


def run_check(
    check: Check,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    h: float = _H,
    max_coords: int | None = None,
    directions: int = 0,
) -> CheckResult:
    """Worst relative error across seeds; see module docstring for the metric."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        forward, tensors = check.make(rng)
        with Tape() as tape:
            loss = forward()
        tape.backward(loss)
        analytic = [t.grad.astype(np.float64).copy() for t in tensors]
        for t in tensors:
            t.grad = None

        pairs_a: list[np.ndarray] = []
        pairs_n: list[np.ndarray] = []
        pairs_r: list[np.ndarray] = []
        for t, grad in zip(tensors, analytic):
            size = t.data.size
            if max_coords is None or size <= max_coords:
                coords = np.arange(size)
            else:
                coords = rng.choice(size, size=max_coords, replace=False)
            numeric, residual = finite_difference(forward, t.data, coords, h)
            pairs_a.append(grad.reshape(-1)[coords])
            pairs_n.append(numeric)
            pairs_r.append(residual)
        if directions:
            center = _loss_value(forward)
            flat_grad = np.concatenate([g.reshape(-1) for g in analytic])
            for _ in range(directions):
                direction = rng.standard_normal(flat_grad.size)
                direction /= np.linalg.norm(direction)
                offset = 0
                for t in tensors:
                    t.data += h * direction[offset : offset + t.data.size].reshape(
                        t.data.shape
                    )
                    offset += t.data.size
                plus = _loss_value(forward)
                offset = 0
                for t in tensors:
                    t.data -= 2 * h * direction[offset : offset + t.data.size].reshape(
                        t.data.shape
                    )
                    offset += t.data.size
                minus = _loss_value(forward)
                offset = 0
                for t in tensors:
                    t.data += h * direction[offset : offset + t.data.size].reshape(
                        t.data.shape
                    )
                    offset += t.data.size
                pairs_a.append(np.array([float(flat_grad @ direction)]))
                pairs_n.append(np.array([(plus - minus) / (2.0 * h)]))
                pairs_r.append(np.array([abs(plus - 2.0 * center + minus) / (2.0 * h)]))

        a = np.concatenate(pairs_a)
        n = np.concatenate(pairs_n)
        r = np.concatenate(pairs_r)
        scale = max(float(np.abs(a).max(initial=0)), float(np.abs(n).max(initial=0)), _TINY)
        # Keep only measurements whose kink-induced error bound is well below
        # the failure threshold; a mostly-filtered check is itself a failure.
        keep = r <= 0.5 * check.tolerance * scale
        if keep.sum() < 0.5 * keep.size:
            worst = float("inf")
            continue
        worst = max(worst, float(np.abs(a[keep] - n[keep]).max(initial=0)) / scale)
    return CheckResult(check.name, worst, check.tolerance)


# --- check builders ----------------------------------------------------------


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    return (out * weights).sum()


def _make_elementwise(rng):
    a = _leaf(rng, (3, 4), 0.5, 1.5)
    b = _leaf(rng, (4,), 0.5, 1.5)

    def forward():
        return (a * b - a / b + (-a).exp() * b + a.log()).sum()

    return forward, [a, b]


def _make_power_sqrt(rng):
    x = _leaf(rng, (3, 4), 0.5, 2.0)
    w = Tensor(rng.uniform(-1, 1, (3, 4)))

    def forward():
        return _weighted_sum(sqrt(x) + x**1.7, w)

    return forward, [x]


def _make_reductions(rng):
    x = _leaf(rng, (3, 4, 2))
    w = Tensor(rng.uniform(-1, 1, (4,)))

    def forward():
        return _weighted_sum(x.mean(axis=(0, 2)), w) + x.sum() * 0.5 + x.mean()

    return forward, [x]


def _make_matmul(rng):
    a = _leaf(rng, (4, 5))
    b = _leaf(rng, (5, 3))
    w = Tensor(rng.uniform(-1, 1, (4, 3)))

    def forward():
        return _weighted_sum(matmul(a, b), w)

    return forward, [a, b]


def _make_matmul_batched(rng):
    a = _leaf(rng, (3, 2, 4))
    b = _leaf(rng, (4, 5))
    w = Tensor(rng.uniform(-1, 1, (3, 2, 5)))

    def forward():
        return _weighted_sum(matmul(a, b), w)

    return forward, [a, b]


def _make_movement(rng):
    x = _leaf(rng, (2, 3, 4))
    w = Tensor(rng.uniform(-1, 1, (2, 5)))

    def forward():
        y = x.transpose((2, 0, 1)).reshape((4, 6))
        z = concat((y, y * 2.0), axis=1)
        return _weighted_sum(z[1:3, 2:7], w)

    return forward, [x]


def _make_softmax(rng):
    x = _leaf(rng, (3, 5), -2.0, 2.0)
    w = Tensor(rng.uniform(-1, 1, (3, 5)))

    def forward():
        return _weighted_sum(softmax(x, axis=-1), w)

    return forward, [x]


def _away_from(values: np.ndarray, points: Sequence[float], gap: float) -> np.ndarray:
    for p in points:
        close = np.abs(values - p) < gap
        values = np.where(close, values + 2 * gap, values)
    return values


def _make_relu(rng):
    data = _away_from(rng.uniform(-1, 1, (4, 4)), [0.0], 0.05)
    x = Tensor(data, requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 4)))

    def forward():
        return _weighted_sum(F.relu(x), w)

    return forward, [x]


def _make_gelu(rng):
    x = _leaf(rng, (4, 4), -2.0, 2.0)
    w = Tensor(rng.uniform(-1, 1, (4, 4)))

    def forward():
        return _weighted_sum(F.gelu(x), w)

    return forward, [x]


def _make_sigmoid(rng):
    x = _leaf(rng, (4, 4), -3.0, 3.0)
    w = Tensor(rng.uniform(-1, 1, (4, 4)))

    def forward():
        return _weighted_sum(F.sigmoid(x), w)

    return forward, [x]


def _make_clip(rng):
    data = _away_from(rng.uniform(0, 1, (5, 5)), [0.2, 0.8], 0.01)
    x = Tensor(data, requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (5, 5)))

    def forward():
        from .tensor import clip

        return _weighted_sum(clip(x, 0.2, 0.8), w)

    return forward, [x]


def _layer_check(layer, x: Tensor, out_shape, rng, extra_args=()):
    w = Tensor(rng.uniform(-1, 1, out_shape))

    def forward():
        return _weighted_sum(layer(x, *extra_args), w)

    return forward, [x] + layer.parameters()


def _make_linear(rng):
    layer = Linear(4, 3, rng, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (6, 4)), (6, 3), rng)


def _make_conv2d(rng):
    layer = Conv2d(3, 4, 3, rng, stride=2, padding=1, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (2, 3, 6, 5)), (2, 4, 3, 3), rng)


def _make_conv2d_grouped(rng):
    layer = Conv2d(4, 6, 3, rng, groups=2, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (2, 4, 5, 5)), (2, 6, 3, 3), rng)


def _make_depthwise(rng):
    layer = Conv2d(4, 4, 3, rng, padding=1, groups=4, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (2, 4, 5, 5)), (2, 4, 5, 5), rng)


def _make_conv_transpose(rng):
    layer = ConvTranspose2d(3, 2, rng=rng, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (2, 3, 4, 4)), (2, 2, 8, 8), rng)


def _make_batchnorm(rng):
    layer = BatchNorm2d(3, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (4, 3, 5, 5)), (4, 3, 5, 5), rng)


def _make_layernorm(rng):
    layer = LayerNorm(6, dtype=np.float64)
    return _layer_check(layer, _leaf(rng, (2, 4, 6)), (2, 4, 6), rng)


def _make_msa(rng):
    block = MsaBlock(8, 2, rng, dtype=np.float64)
    return _layer_check(block, _leaf(rng, (2, 5, 8)), (2, 5, 8), rng)


def _make_mep(rng):
    block = MepBlock(6, 2, rng, dtype=np.float64)
    return _layer_check(block, _leaf(rng, (2, 4, 6)), (2, 4, 6), rng, extra_args=((2, 2),))


def _make_ffn(rng):
    block = FeedForwardBlock(6, 2, rng, dtype=np.float64)
    return _layer_check(block, _leaf(rng, (2, 4, 6)), (2, 4, 6), rng)


def _make_bce(rng):
    raw = _leaf(rng, (3, 4, 4), -2.0, 2.0)
    target = (rng.random((3, 4, 4)) > 0.5).astype(np.float64)

    def forward():
        return bce_loss(F.sigmoid(raw), target)

    return forward, [raw]


def op_checks() -> list[Check]:
    return [
        Check("elementwise", _make_elementwise, 1e-5),
        Check("power-sqrt", _make_power_sqrt, 1e-5),
        Check("reductions", _make_reductions, 1e-5),
        Check("matmul", _make_matmul, 1e-6),
        Check("matmul-batched", _make_matmul_batched, 1e-6),
        Check("movement", _make_movement, 1e-5),
        Check("softmax", _make_softmax, 1e-5),
        Check("relu", _make_relu, 1e-5),
        Check("gelu", _make_gelu, 1e-5),
        Check("sigmoid", _make_sigmoid, 1e-5),
        Check("clip", _make_clip, 1e-5),
        Check("linear", _make_linear, 1e-4),
        Check("conv2d", _make_conv2d, 1e-4),
        Check("conv2d-grouped", _make_conv2d_grouped, 1e-4),
        Check("conv2d-depthwise", _make_depthwise, 1e-4),
        Check("conv-transpose2d", _make_conv_transpose, 1e-4),
        Check("batchnorm2d", _make_batchnorm, 1e-4),
        Check("layernorm", _make_layernorm, 1e-4),
    ]


def block_checks() -> list[Check]:
    return [
        Check("msa-block", _make_msa, 1e-4),
        Check("mep-block", _make_mep, 1e-4),
        Check("ffn-block", _make_ffn, 1e-4),
        Check("bce-loss", _make_bce, 1e-5),
    ]


def _make_miniature(rng):
    # End-to-end miniature: full variant at 32x32, C_f=16, T=2, taps {1,2},
    # one skip branch, scaled-down stem and decoder widths.
    from .model import ModelConfig, TransCC

    config = ModelConfig(
        image_size=32,
        in_channels=1,
        embed_dim=16,
        depth=2,
        heads=2,
        expansion=2,
        dropout=0.0,
        variant="full",
        taps=(1, 2),
        stem_channels=(2, 3, 4, 6),
        decoder_channels=(6, 6, 4, 4),
        skip_channels=(6,),
    )
    model = TransCC(config, seed=int(rng.integers(2**31)), dtype=np.float64)
    x = Tensor(rng.uniform(0.0, 1.0, (1, 1, 32, 32)))
    target = (rng.random((1, 32, 32)) > 0.7).astype(np.float64)

    def forward():
        return bce_loss(model(x)[:, 1], target)

    return forward, model.parameters()


def model_check() -> Check:
    return Check("miniature-end-to-end", _make_miniature, 1e-3)


def run_suite(
    seeds: Sequence[int] = (0, 1, 2),
    include_model: bool = True,
    model_seeds: Sequence[int] = (0,),
) -> list[CheckResult]:
    results = [run_check(c, seeds=seeds) for c in op_checks() + block_checks()]
    if include_model:
        results.append(
            run_check(
                model_check(),
                seeds=model_seeds,
                max_coords=8,
                directions=10,
            )
        )
    return results
