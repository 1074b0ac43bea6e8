"""Differentiable neural-net primitives: activations, dropout, convolutions.

Convolutions lower to im2col + one matrix product so the heavy lifting stays
in BLAS. Backward recomputes the im2col view from the retained padded input
instead of caching the column matrix, trading a little compute for a lot of
peak memory.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidRateError, ShapeMismatchError
from .tensor import Tensor, record

__all__ = [
    "relu",
    "gelu",
    "sigmoid",
    "dropout",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
]

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    t = np.tanh(_GELU_C0 * (v + _GELU_C1 * v**3))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return record((x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return record((x,), out, lambda g: (g * out * (1.0 - out),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout (training path; evaluation skips the call entirely)."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRateError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) * scale
    return record((x,), x.data * mask, lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T (+ bias) on 2-D x. weight: (D_out, D_in).

    The transpose stays a view, so BLAS runs without materializing it.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"linear expects (N, D_in) x and (D_out, D_in) weight, got "
            f"{x.shape} and {weight.shape}"
        )
    x_data, w_data = x.data, weight.data
    out = np.matmul(x_data, w_data.T)
    if bias is not None:
        out += bias.data

    def backward(g):
        d_x = np.matmul(g, w_data)
        d_w = np.matmul(g.T, x_data)
        d_b = g.sum(axis=0) if bias is not None else None
        grads = (d_x, d_w, d_b)
        return grads if bias is not None else grads[:2]

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, out, backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output extent: floor((size + 2*padding - kernel)/stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C*K*K, out_h*out_w) patch matrix (copies)."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kernel, kernel, out_h, out_w),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(b, c * kernel * kernel, out_h * out_w)


def _col2im(
    cols: np.ndarray,
    shape: tuple[int, int, int, int],
    kernel: int,
    stride: int,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto the padded canvas."""
    b, c, _, _ = shape
    cols = cols.reshape(b, c, kernel, kernel, out_h, out_w)
    canvas = np.zeros(shape, dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            canvas[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += cols[:, :, i, j]
    return canvas


def _check_conv_args(x: Tensor, weight: Tensor, groups: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    if weight.shape[2] != weight.shape[3]:
        raise ShapeMismatchError(f"only square kernels supported, got {weight.shape}")
    if x.shape[1] != weight.shape[1] * groups or weight.shape[0] % groups:
        raise ShapeMismatchError(
            f"channels {x.shape[1]} do not match weight {weight.shape} "
            f"with groups={groups}"
        )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation. weight: (C_out, C_in/groups, K, K)."""
    _check_conv_args(x, weight, groups)
    b, c_in, h, w = x.shape
    c_out, _, kernel, _ = weight.shape
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(
            f"kernel {kernel} with stride {stride}, padding {padding} "
            f"does not fit input {h}x{w}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    if groups == c_in == c_out and stride == 1:
        return _depthwise_conv2d(x, weight, bias, xp, padding, out_h, out_w)

    n = out_h * out_w
    ckk = (c_in // groups) * kernel * kernel
    cols = _im2col(xp, kernel, stride, out_h, out_w).reshape(b, groups, ckk, n)
    w_mat = weight.data.reshape(groups, c_out // groups, ckk)
    out = np.matmul(w_mat, cols).reshape(b, c_out, out_h, out_w)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        gy = g.reshape(b, groups, c_out // groups, n)
        cols_b = _im2col(xp, kernel, stride, out_h, out_w).reshape(b, groups, ckk, n)
        d_w = np.matmul(gy, cols_b.swapaxes(-1, -2)).sum(axis=0)
        d_cols = np.matmul(w_mat.swapaxes(-1, -2), gy)
        dxp = _col2im(
            d_cols.reshape(b, c_in * kernel * kernel, n),
            xp.shape,
            kernel,
            stride,
            out_h,
            out_w,
        )
        d_x = dxp[:, :, padding : padding + h, padding : padding + w]
        d_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = (d_x, d_w.reshape(weight.shape), d_b)
        return grads if bias is not None else grads[:2]

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, out, backward)


def _depthwise_conv2d(x, weight, bias, xp, padding, out_h, out_w):
    # Stride-1 depthwise path: K*K shifted multiply-adds beat im2col here.
    b, c, h, w = x.shape
    kernel = weight.shape[2]
    w_data = weight.data
    out = np.zeros((b, c, out_h, out_w), dtype=x.data.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += w_data[:, 0, i, j].reshape(1, c, 1, 1) * xp[
                :, :, i : i + out_h, j : j + out_w
            ]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    def backward(g):
        d_w = np.zeros_like(w_data)
        dxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                patch = xp[:, :, i : i + out_h, j : j + out_w]
                d_w[:, 0, i, j] = (patch * g).sum(axis=(0, 2, 3))
                dxp[:, :, i : i + out_h, j : j + out_w] += (
                    w_data[:, 0, i, j].reshape(1, c, 1, 1) * g
                )
        d_x = dxp[:, :, padding : padding + h, padding : padding + w]
        d_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = (d_x, d_w, d_b)
        return grads if bias is not None else grads[:2]

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, out, backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
) -> Tensor:
    """Transposed convolution (no padding). weight: (C_in, C_out, K, K).

    Output extent is (in - 1)*stride + K, so K=2, stride=2 exactly doubles.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv_transpose expects 4-D input and weight, got {x.shape} and "
            f"{weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            f"input channels {x.shape[1]} do not match weight {weight.shape}"
        )
    b, c_in, h, w = x.shape
    _, c_out, kernel, _ = weight.shape
    out_h = (h - 1) * stride + kernel
    out_w = (w - 1) * stride + kernel
    ckk = c_out * kernel * kernel
    w_mat = weight.data.reshape(c_in, ckk)
    x_mat = x.data.reshape(b, c_in, h * w)
    cols = np.matmul(w_mat.T[None], x_mat)
    out = _col2im(cols, (b, c_out, out_h, out_w), kernel, stride, h, w)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    def backward(g):
        g_cols = _im2col(g, kernel, stride, h, w)
        d_x = np.matmul(w_mat[None], g_cols).reshape(b, c_in, h, w)
        d_w = np.matmul(x_mat, g_cols.swapaxes(-1, -2)).sum(axis=0)
        d_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        grads = (d_x, d_w.reshape(weight.shape), d_b)
        return grads if bias is not None else grads[:2]

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(inputs, out, backward)
