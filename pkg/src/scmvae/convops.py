"""Plain-numpy convolution primitives, channels-last (NHWC, HWIO weights).

Channels-last keeps the innermost axis contiguous through im2col/col2im and
lets the conv matmul write its output with no transposes, which matters for a
CPU-only training loop.  col2im avoids np.add.at by looping over the k*k
kernel offsets with strided slice-adds.
"""

from __future__ import annotations

import numpy as np


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B,H,W,C) -> (B*Ho*Wo, k*k*C) patch matrix."""
    B, H, W, C = x.shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, Ho, Wo, k, k, C),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )
    return np.ascontiguousarray(win).reshape(B * Ho * Wo, k * k * C)


def col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add the patch matrix back to (B,H,W,C)."""
    B, H, W, C = x_shape
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    buf = cols.reshape(B, Ho, Wo, k, k, C)
    out = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += buf[:, :, :, i, j, :]
    if pad:
        out = out[:, pad : pad + H, pad : pad + W, :]
    return out


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """x (B,H,W,Cin), w (k,k,Cin,Cout) -> out (B,Ho,Wo,Cout). Returns (out, col)."""
    B, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[3]
    col = im2col(x, k, stride, pad)
    Ho = conv_out_size(H, k, stride, pad)
    Wo = conv_out_size(W, k, stride, pad)
    out = col @ w.reshape(k * k * Cin, Cout)
    return out.reshape(B, Ho, Wo, Cout), col


def conv2d_input_grad(dout: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input; also the transposed-conv forward."""
    B, Ho, Wo, Cout = dout.shape
    k = w.shape[0]
    Cin = w.shape[2]
    dcol = dout.reshape(B * Ho * Wo, Cout) @ w.reshape(k * k * Cin, Cout).T
    return col2im(dcol, x_shape, k, stride, pad)


def conv2d_weight_grad(col: np.ndarray, dout: np.ndarray, w_shape: tuple) -> np.ndarray:
    """Gradient of conv2d w.r.t. the kernel, given the cached im2col matrix."""
    B, Ho, Wo, Cout = dout.shape
    g = col.T @ dout.reshape(B * Ho * Wo, Cout)
    return g.reshape(w_shape)


def conv_transpose2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int, out_hw: tuple) -> np.ndarray:
    """x (B,Hi,Wi,Cin), w (k,k,Cout,Cin) -> (B,Ho,Wo,Cout) with (Ho,Wo)=out_hw.

    Runs as the input-gradient of a conv mapping Cout -> Cin whose HWIO kernel
    layout matches w exactly.
    """
    B = x.shape[0]
    out_shape = (B, out_hw[0], out_hw[1], w.shape[2])
    return conv2d_input_grad(x, w, out_shape, stride, pad)
