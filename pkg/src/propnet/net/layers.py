"""3x3 convolution, stride-2 transposed convolution and ReLU, with exact backward passes.

Tensors are batched ``(N, C, H, W)``; 3-D inputs are treated as a batch of
one. Convolutions use zero padding 1, so a stride-``s`` layer maps ``H`` to
``(H - 1) // s + 1``. The transposed convolution is implemented literally as
the adjoint of the stride-2 convolution and therefore doubles ``H`` and
``W``. Kernels follow the usual layouts: ``(C_out, C_in, 3, 3)`` for
convolution and ``(C_in, C_out, 3, 3)`` for the transposed convolution.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch

K = 3
PAD = 1


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")
    return x, False


def out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """Patches of the zero-padded input as a ``(N*H'*W', C*9)`` matrix."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * K * K)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the input grid."""
    n, c, h, w = shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    cols = cols.reshape(n, ho, wo, c, K, K)
    xp = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=cols.dtype)
    for i in range(K):
        for j in range(K):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return xp[:, :, PAD : PAD + h, PAD : PAD + w]


def _check_kernel(kernels: np.ndarray, c_in: int, axis: int) -> None:
    if kernels.ndim != 4 or kernels.shape[2:] != (K, K):
        raise ShapeMismatch(f"kernels must be (*, *, 3, 3), got {kernels.shape}")
    if kernels.shape[axis] != c_in:
        raise ShapeMismatch(f"kernel expects {kernels.shape[axis]} input channels, input has {c_in}")


def conv_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    _check_kernel(kernels, c, 1)
    c_out = kernels.shape[0]
    ho, wo = out_size(h, stride), out_size(w, stride)
    out = im2col(xb, stride) @ kernels.reshape(c_out, -1).T
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv_backward(
    upstream: np.ndarray, cached_input: np.ndarray, kernels: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, kernels, bias) of :func:`conv_forward`."""
    g, single = _batched(upstream)
    xb, _ = _batched(cached_input)
    n, c, h, w = xb.shape
    _check_kernel(kernels, c, 1)
    c_out = kernels.shape[0]
    if g.shape != (n, c_out, out_size(h, stride), out_size(w, stride)):
        raise ShapeMismatch(f"upstream gradient shape {g.shape} does not match the forward output")
    gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    k_grad = (gm.T @ im2col(xb, stride)).reshape(kernels.shape)
    b_grad = g.sum(axis=(0, 2, 3))
    x_grad = col2im(gm @ kernels.reshape(c_out, -1), xb.shape, stride)
    return (x_grad[0] if single else x_grad), k_grad, b_grad


def deconv_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Stride-2 transposed convolution, ``(N, C_in, H, W) -> (N, C_out, 2H, 2W)``."""
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    _check_kernel(kernels, c, 0)
    c_out = kernels.shape[1]
    xm = xb.transpose(0, 2, 3, 1).reshape(-1, c)
    out = col2im(xm @ kernels.reshape(c, -1), (n, c_out, 2 * h, 2 * w), 2)
    if bias is not None:
        out = out + bias.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def deconv_backward(
    upstream: np.ndarray, cached_input: np.ndarray, kernels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (input, kernels, bias) of :func:`deconv_forward`."""
    g, single = _batched(upstream)
    xb, _ = _batched(cached_input)
    n, c, h, w = xb.shape
    _check_kernel(kernels, c, 0)
    c_out = kernels.shape[1]
    if g.shape != (n, c_out, 2 * h, 2 * w):
        raise ShapeMismatch(f"upstream gradient shape {g.shape} does not match the forward output")
    cols = im2col(g, 2)
    xm = xb.transpose(0, 2, 3, 1).reshape(-1, c)
    k_grad = (xm.T @ cols).reshape(kernels.shape)
    b_grad = g.sum(axis=(0, 2, 3))
    x_grad = (cols @ kernels.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    x_grad = np.ascontiguousarray(x_grad)
    return (x_grad[0] if single else x_grad), k_grad, b_grad


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(upstream: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(cached_input > 0, upstream, 0)
