# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im, max pooling and RoI pooling.

Mirrors ``_kernels_py`` exactly, including first-occurrence tie breaking.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _floordiv(Py_ssize_t a, Py_ssize_t b) nogil:
    cdef Py_ssize_t q = a // b
    if (a % b != 0) and ((a < 0) != (b < 0)):
        q -= 1
    return q


cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] cols, int kh, int kw, int stride,
            int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(out_h):
                            for ox in range(out_w):
                                cols[n, row, oy * out_w + ox] = x[n, c, oy * stride + i, ox * stride + j]


def im2col(x, int kh, int kw, int stride, int out_h, int out_w):
    x = np.ascontiguousarray(x)
    cols = np.empty((x.shape[0], x.shape[1] * kh * kw, out_h * out_w), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, out_h, out_w)
    return cols


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] dx, int kh, int kw, int stride,
            int out_h, int out_w):
    cdef Py_ssize_t n, c, i, j, oy, ox, row
    cdef Py_ssize_t N = dx.shape[0], C = dx.shape[1]
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for oy in range(out_h):
                            for ox in range(out_w):
                                dx[n, c, oy * stride + i, ox * stride + j] += cols[n, row, oy * out_w + ox]


def col2im(cols, int n, int c, int h, int w, int kh, int kw, int stride, int out_h, int out_w):
    cols = np.ascontiguousarray(cols)
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, dx, kh, kw, stride, out_h, out_w)
    return dx


def _maxpool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] y, cnp.int64_t[:, :, :, ::1] am,
                 int k, int stride):
    cdef Py_ssize_t n, c, oy, ox, i, j, best_i, hh, ww
    cdef Py_ssize_t W = x.shape[3]
    cdef real best, v
    with nogil:
        for n in range(y.shape[0]):
            for c in range(y.shape[1]):
                for oy in range(y.shape[2]):
                    for ox in range(y.shape[3]):
                        hh = oy * stride
                        ww = ox * stride
                        best = x[n, c, hh, ww]
                        best_i = hh * W + ww
                        for i in range(k):
                            for j in range(k):
                                v = x[n, c, hh + i, ww + j]
                                if v > best:
                                    best = v
                                    best_i = (hh + i) * W + ww + j
                        y[n, c, oy, ox] = best
                        am[n, c, oy, ox] = best_i


def maxpool_forward(x, int k, int stride):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    y = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    am = np.empty((n, c, out_h, out_w), dtype=np.int64)
    _maxpool_fwd(x, y, am, k, stride)
    return y, am


def _scatter(real[:, :, :, ::1] dy, cnp.int64_t[:, :, :, ::1] am, cnp.int64_t[::1] bidx,
             real[:, :, ::1] dx):
    cdef Py_ssize_t r, c, i, j, a
    with nogil:
        for r in range(dy.shape[0]):
            for c in range(dy.shape[1]):
                for i in range(dy.shape[2]):
                    for j in range(dy.shape[3]):
                        a = am[r, c, i, j]
                        if a >= 0:
                            dx[bidx[r], c, a] += dy[r, c, i, j]


def maxpool_backward(dy, argmax, int h, int w):
    dy = np.ascontiguousarray(dy)
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    bidx = np.arange(n, dtype=np.int64)
    _scatter(dy, np.ascontiguousarray(argmax), bidx, dx)
    return dx.reshape(n, c, h, w)


def _roi_fwd(real[:, :, :, ::1] feat, cnp.int64_t[:, ::1] boxes, real[:, :, :, ::1] y,
             cnp.int64_t[:, :, :, ::1] am):
    cdef Py_ssize_t r, c, i, j, yy, xx, b, x1, y1, x2, y2, rh, rw, hs, he, ws, we, best_i
    cdef Py_ssize_t FH = feat.shape[2], FW = feat.shape[3]
    cdef Py_ssize_t OH = y.shape[2], OW = y.shape[3]
    cdef real best, v
    with nogil:
        for r in range(boxes.shape[0]):
            b = boxes[r, 0]
            x1 = boxes[r, 1]
            y1 = boxes[r, 2]
            x2 = boxes[r, 3]
            y2 = boxes[r, 4]
            rh = y2 - y1
            rw = x2 - x1
            for i in range(OH):
                hs = _clip(y1 + _floordiv(i * rh, OH), 0, FH)
                he = _clip(y1 - _floordiv(-(i + 1) * rh, OH), 0, FH)
                for j in range(OW):
                    ws = _clip(x1 + _floordiv(j * rw, OW), 0, FW)
                    we = _clip(x1 - _floordiv(-(j + 1) * rw, OW), 0, FW)
                    for c in range(feat.shape[1]):
                        if he <= hs or we <= ws:
                            y[r, c, i, j] = 0
                            am[r, c, i, j] = -1
                            continue
                        best = feat[b, c, hs, ws]
                        best_i = hs * FW + ws
                        for yy in range(hs, he):
                            for xx in range(ws, we):
                                v = feat[b, c, yy, xx]
                                if v > best:
                                    best = v
                                    best_i = yy * FW + xx
                        y[r, c, i, j] = best
                        am[r, c, i, j] = best_i


def roi_pool_forward(feat, boxes, int out_h, int out_w):
    feat = np.ascontiguousarray(feat)
    boxes = np.ascontiguousarray(boxes, dtype=np.int64)
    r = boxes.shape[0]
    y = np.empty((r, feat.shape[1], out_h, out_w), dtype=feat.dtype)
    am = np.empty((r, feat.shape[1], out_h, out_w), dtype=np.int64)
    _roi_fwd(feat, boxes, y, am)
    return y, am


def roi_pool_backward(dy, argmax, batch_idx, int n, int h, int w):
    dy = np.ascontiguousarray(dy)
    c = dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    bidx = np.ascontiguousarray(batch_idx, dtype=np.int64)
    _scatter(dy, np.ascontiguousarray(argmax), bidx, dx)
    return dx.reshape(n, c, h, w)
