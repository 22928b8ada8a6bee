"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and semantics; convolution goes through an im2col view and a
BLAS contraction, so results agree with the direct loops only up to summation
order (well inside 1e-12 relative).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(xpad, w, stride, out_h, out_w):
    kh, kw = w.shape[2], w.shape[3]
    cols = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(gout, w, stride, pad_h, pad_w):
    B, O, out_h, out_w = gout.shape
    C, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gx = np.zeros((B, C, pad_h, pad_w))
    for dy in range(kh):
        for dx in range(kw):
            contrib = np.tensordot(w[:, :, dy, dx], gout, axes=([0], [1]))  # C, B, Ho, Wo
            gx[:, :, dy : dy + (out_h - 1) * stride + 1 : stride, dx : dx + (out_w - 1) * stride + 1 : stride] += (
                contrib.transpose(1, 0, 2, 3)
            )
    return gx


def conv2d_backward_weight(gout, xpad, stride, kh, kw):
    out_h, out_w = gout.shape[2], gout.shape[3]
    cols = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    return np.tensordot(gout, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


def maxpool2x2_forward(x):
    B, C, H, W = x.shape
    blocks = x[:, :, : H // 2 * 2, : W // 2 * 2].reshape(B, C, H // 2, 2, W // 2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)  # first maximum wins
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(gout, arg):
    B, C, H, W = gout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    blocks = np.where(onehot, gout[..., None], 0.0).reshape(B, C, H, W, 2, 2)
    return np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * H, 2 * W))


def box_sum_valid(x, r):
    k = 2 * r + 1
    return np.ascontiguousarray(sliding_window_view(x, (k, k), axis=(1, 2)).sum(axis=(-2, -1)))


def box_sum_adjoint(g, r):
    k = 2 * r + 1
    padded = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    return np.ascontiguousarray(sliding_window_view(padded, (k, k), axis=(1, 2)).sum(axis=(-2, -1)))
