# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: convolution, 2x2 max-pooling and valid box sums.

Every public function mirrors the signature of its counterpart in
``_kernels_py`` and operates on C-contiguous float64 arrays.

Stride-1 convolutions use a flat-plane layout: with the padded input stored
as (C, B*Hp*Wp), the tap (dy, dx) of every output pixel sits at a fixed offset
dy*Wp + dx, so each tap is one GEMM on a strided view handed to BLAS without
copying.  Columns past the valid output width are computed and discarded.
The ``*_direct`` functions are the naive loops, kept for other strides and as
the reference path.
"""
import numpy as np
from scipy.linalg.cython_blas cimport dgemm


cdef void _gemm(char* ta, char* tb, int m, int n, int k, double* a, int lda,
                double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    # column-major C[m x n] = op(A) op(B) + beta * C
    cdef double one = 1.0
    dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


def _to_planes(double[:, :, :, ::1] x):
    return np.ascontiguousarray(np.asarray(x).transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)


def conv2d_forward(double[:, :, :, ::1] xpad, double[:, :, :, ::1] w, int stride, int out_h, int out_w):
    if stride != 1:
        return conv2d_forward_direct(xpad, w, stride, out_h, out_w)
    cdef int B = xpad.shape[0], C = xpad.shape[1], Hp = xpad.shape[2], Wp = xpad.shape[3]
    cdef int O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int total = B * Hp * Wp
    cdef int n = total - (kh - 1) * Wp - (kw - 1)
    cdef double[:, ::1] X = _to_planes(xpad)
    cdef double[:, :, :, ::1] Wt = np.ascontiguousarray(np.asarray(w).transpose(2, 3, 0, 1))
    out2 = np.zeros((O, total))
    cdef double[:, ::1] Y = out2
    cdef int dy, dx
    with nogil:
        for dy in range(kh):
            for dx in range(kw):
                # Y^T[n x O] += X_tap^T[n x C] @ W_tap^T[C x O]
                _gemm(b"N", b"N", n, O, C, &X[0, dy * Wp + dx], total, &Wt[dy, dx, 0, 0], C, 1.0, &Y[0, 0], total)
    return np.ascontiguousarray(out2.reshape(O, B, Hp, Wp)[:, :, :out_h, :out_w].transpose(1, 0, 2, 3))


def _grad_planes(gout, int Hp, int Wp):
    B, O, out_h, out_w = gout.shape
    G = np.zeros((O, B, Hp, Wp))
    G[:, :, :out_h, :out_w] = np.asarray(gout).transpose(1, 0, 2, 3)
    return G.reshape(O, -1)


def conv2d_backward_input(double[:, :, :, ::1] gout, double[:, :, :, ::1] w, int stride, int pad_h, int pad_w):
    """Gradient w.r.t. the padded input; shape (B, C, pad_h, pad_w)."""
    if stride != 1:
        return conv2d_backward_input_direct(gout, w, stride, pad_h, pad_w)
    cdef int B = gout.shape[0], O = gout.shape[1]
    cdef int C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef int Wp = pad_w
    cdef int total = B * pad_h * pad_w
    cdef int n = total - (kh - 1) * Wp - (kw - 1)
    cdef double[:, ::1] G = _grad_planes(gout, pad_h, pad_w)
    cdef double[:, :, :, ::1] Wt = np.ascontiguousarray(np.asarray(w).transpose(2, 3, 0, 1))
    gx2 = np.zeros((C, total))
    cdef double[:, ::1] GX = gx2
    cdef int dy, dx
    with nogil:
        for dy in range(kh):
            for dx in range(kw):
                # GX_tap^T[n x C] += G^T[n x O] @ W_tap[O x C]
                _gemm(b"N", b"T", n, C, O, &G[0, 0], total, &Wt[dy, dx, 0, 0], C, 1.0, &GX[0, dy * Wp + dx], total)
    return np.ascontiguousarray(gx2.reshape(C, B, pad_h, pad_w).transpose(1, 0, 2, 3))


def conv2d_backward_weight(double[:, :, :, ::1] gout, double[:, :, :, ::1] xpad, int stride, int kh, int kw):
    if stride != 1:
        return conv2d_backward_weight_direct(gout, xpad, stride, kh, kw)
    cdef int B = xpad.shape[0], C = xpad.shape[1], Hp = xpad.shape[2], Wp = xpad.shape[3]
    cdef int O = gout.shape[1]
    cdef int total = B * Hp * Wp
    cdef int n = total - (kh - 1) * Wp - (kw - 1)
    cdef double[:, ::1] X = _to_planes(xpad)
    cdef double[:, ::1] G = _grad_planes(gout, Hp, Wp)
    gwt = np.empty((kh, kw, O, C))
    cdef double[:, :, :, ::1] GW = gwt
    cdef int dy, dx
    with nogil:
        for dy in range(kh):
            for dx in range(kw):
                # GW_tap^T[C x O] = X_tap[C x n] @ G^T[n x O]
                _gemm(b"T", b"N", C, O, n, &X[0, dy * Wp + dx], total, &G[0, 0], total, 0.0, &GW[dy, dx, 0, 0], C)
    return np.ascontiguousarray(gwt.transpose(2, 3, 0, 1))


def conv2d_forward_direct(double[:, :, :, ::1] xpad, double[:, :, :, ::1] w, int stride, int out_h, int out_w):
    cdef Py_ssize_t B = xpad.shape[0], C = xpad.shape[1]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    out = np.zeros((B, O, out_h, out_w))
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, oc, c, dy, dx, y, x
    cdef double wv
    cdef double* orow
    cdef double* irow
    with nogil:
        for b in range(B):
            for oc in range(O):
                for c in range(C):
                    for dy in range(kh):
                        for dx in range(kw):
                            wv = w[oc, c, dy, dx]
                            if wv == 0.0:
                                continue
                            for y in range(out_h):
                                orow = &o[b, oc, y, 0]
                                irow = &xpad[b, c, y * stride + dy, dx]
                                if stride == 1:
                                    for x in range(out_w):
                                        orow[x] += wv * irow[x]
                                else:
                                    for x in range(out_w):
                                        orow[x] += wv * irow[x * stride]
    return out


def conv2d_backward_input_direct(double[:, :, :, ::1] gout, double[:, :, :, ::1] w, int stride, int pad_h, int pad_w):
    """Gradient w.r.t. the padded input; shape (B, C, pad_h, pad_w)."""
    cdef Py_ssize_t B = gout.shape[0], O = gout.shape[1], out_h = gout.shape[2], out_w = gout.shape[3]
    cdef Py_ssize_t C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx = np.zeros((B, C, pad_h, pad_w))
    cdef double[:, :, :, ::1] g = gx
    cdef Py_ssize_t b, oc, c, dy, dx, y, x
    cdef double wv
    cdef double* grow
    cdef double* orow
    with nogil:
        for b in range(B):
            for oc in range(O):
                for c in range(C):
                    for dy in range(kh):
                        for dx in range(kw):
                            wv = w[oc, c, dy, dx]
                            if wv == 0.0:
                                continue
                            for y in range(out_h):
                                orow = &gout[b, oc, y, 0]
                                grow = &g[b, c, y * stride + dy, dx]
                                if stride == 1:
                                    for x in range(out_w):
                                        grow[x] += wv * orow[x]
                                else:
                                    for x in range(out_w):
                                        grow[x * stride] += wv * orow[x]
    return gx


def conv2d_backward_weight_direct(double[:, :, :, ::1] gout, double[:, :, :, ::1] xpad, int stride, int kh, int kw):
    cdef Py_ssize_t B = gout.shape[0], O = gout.shape[1], out_h = gout.shape[2], out_w = gout.shape[3]
    cdef Py_ssize_t C = xpad.shape[1]
    gw = np.zeros((O, C, kh, kw))
    cdef double[:, :, :, ::1] g = gw
    cdef Py_ssize_t b, oc, c, dy, dx, y, x
    cdef double acc
    cdef double* orow
    cdef double* irow
    with nogil:
        for oc in range(O):
            for c in range(C):
                for dy in range(kh):
                    for dx in range(kw):
                        acc = 0.0
                        for b in range(B):
                            for y in range(out_h):
                                orow = &gout[b, oc, y, 0]
                                irow = &xpad[b, c, y * stride + dy, dx]
                                if stride == 1:
                                    for x in range(out_w):
                                        acc += orow[x] * irow[x]
                                else:
                                    for x in range(out_w):
                                        acc += orow[x] * irow[x * stride]
                        g[oc, c, dy, dx] = acc
    return gw


def maxpool2x2_forward(double[:, :, :, ::1] x):
    """Returns (pooled, argmax) where argmax in 0..3 indexes the 2x2 block row-major; ties keep the first."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2] // 2, W = x.shape[3] // 2
    out = np.empty((B, C, H, W))
    arg = np.empty((B, C, H, W), dtype=np.int8)
    cdef double[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, y, xx
    cdef double best, v
    cdef signed char k
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        best = x[b, c, 2 * y, 2 * xx]
                        k = 0
                        v = x[b, c, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, c, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, c, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[b, c, y, xx] = best
                        a[b, c, y, xx] = k
    return out, arg


def maxpool2x2_backward(double[:, :, :, ::1] gout, signed char[:, :, :, ::1] arg):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], H = gout.shape[2], W = gout.shape[3]
    gx = np.zeros((B, C, 2 * H, 2 * W))
    cdef double[:, :, :, ::1] g = gx
    cdef Py_ssize_t b, c, y, xx
    cdef signed char k
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        k = arg[b, c, y, xx]
                        g[b, c, 2 * y + k // 2, 2 * xx + k % 2] = gout[b, c, y, xx]
    return gx


def box_sum_valid(double[:, :, ::1] x, int r):
    """Sum over every fully-interior (2r+1)x(2r+1) window of each plane of ``x`` (N, H, W)."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t k = 2 * r + 1
    cdef Py_ssize_t oh = H - k + 1, ow = W - k + 1
    out = np.zeros((N, oh, ow))
    cdef double[:, :, ::1] o = out
    colsum_arr = np.zeros(W)
    cdef double[::1] cs = colsum_arr
    cdef Py_ssize_t n, y, xx, j
    cdef double acc
    with nogil:
        for n in range(N):
            for y in range(oh):
                for xx in range(W):
                    acc = 0.0
                    for j in range(k):
                        acc += x[n, y + j, xx]
                    cs[xx] = acc
                for xx in range(ow):
                    acc = 0.0
                    for j in range(k):
                        acc += cs[xx + j]
                    o[n, y, xx] = acc
    return out


def box_sum_adjoint(double[:, :, ::1] g, int r):
    """Adjoint of ``box_sum_valid``: scatter every window sum back over its window."""
    cdef Py_ssize_t N = g.shape[0], oh = g.shape[1], ow = g.shape[2]
    cdef Py_ssize_t k = 2 * r + 1
    cdef Py_ssize_t H = oh + k - 1, W = ow + k - 1
    out = np.zeros((N, H, W))
    cdef double[:, :, ::1] o = out
    rowacc_arr = np.zeros(W)
    cdef double[::1] ra = rowacc_arr
    cdef Py_ssize_t n, y, xx, j, y0, y1
    cdef double acc
    with nogil:
        for n in range(N):
            for y in range(H):
                # windows whose rows cover y: y0..y1 inclusive
                y0 = y - k + 1
                if y0 < 0:
                    y0 = 0
                y1 = y
                if y1 > oh - 1:
                    y1 = oh - 1
                for xx in range(ow):
                    acc = 0.0
                    for j in range(y0, y1 + 1):
                        acc += g[n, j, xx]
                    ra[xx] = acc
                for xx in range(W):
                    acc = 0.0
                    for j in range(xx - k + 1, xx + 1):
                        if 0 <= j < ow:
                            acc += ra[j]
                    o[n, y, xx] = acc
    return out
