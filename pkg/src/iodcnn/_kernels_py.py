"""Pure numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` extension; used when
the extension is not built or ``IODCNN_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, out_h, out_w):
    # x is already padded: [N, C, H, W] -> [N, C*kh*kw, out_h*out_w]
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # win: [N, C, out_h, out_w, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, out_h * out_w)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, h, w, kh, kw, stride, out_h, out_w):
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, out_h, out_w)
    for i in range(kh):
        hi = i + stride * out_h
        for j in range(kw):
            wj = j + stride * out_w
            dx[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    return dx


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    win = win.reshape(n, c, out_h, out_w, k * k)
    local = win.argmax(axis=-1)  # first occurrence on ties
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    oy = np.arange(out_h)[:, None] * stride
    ox = np.arange(out_w)[None, :] * stride
    argmax = (oy + local // k) * w + (ox + local % k)
    return np.ascontiguousarray(y), argmax.astype(np.int64)


def maxpool_backward(dy, argmax, h, w):
    n, c = dy.shape[:2]
    dx = np.zeros((n * c, h * w), dtype=dy.dtype)
    rows = np.repeat(np.arange(n * c), dy.shape[2] * dy.shape[3])
    np.add.at(dx, (rows, argmax.reshape(-1)), dy.reshape(-1))
    return dx.reshape(n, c, h, w)


def roi_pool_forward(feat, boxes, out_h, out_w):
    # boxes: int64 [R, 5] of (batch, x1, y1, x2, y2) in feature cells, end-exclusive
    _, c, fh, fw = feat.shape
    r = boxes.shape[0]
    y = np.zeros((r, c, out_h, out_w), dtype=feat.dtype)
    argmax = np.full((r, c, out_h, out_w), -1, dtype=np.int64)
    for ri in range(r):
        b, x1, y1, x2, y2 = (int(v) for v in boxes[ri])
        rh, rw = y2 - y1, x2 - x1
        for i in range(out_h):
            hs = min(max(y1 + (i * rh) // out_h, 0), fh)
            he = min(max(y1 - ((-(i + 1) * rh) // out_h), 0), fh)
            for j in range(out_w):
                ws = min(max(x1 + (j * rw) // out_w, 0), fw)
                we = min(max(x1 - ((-(j + 1) * rw) // out_w), 0), fw)
                if he <= hs or we <= ws:
                    continue
                patch = feat[b, :, hs:he, ws:we].reshape(c, -1)
                local = patch.argmax(axis=1)
                y[ri, :, i, j] = patch[np.arange(c), local]
                pw = we - ws
                argmax[ri, :, i, j] = (hs + local // pw) * fw + (ws + local % pw)
    return y, argmax


def roi_pool_backward(dy, argmax, batch_idx, n, h, w):
    c = dy.shape[1]
    dx = np.zeros((n, c, h * w), dtype=dy.dtype)
    valid = argmax >= 0
    rr, cc, _, _ = np.nonzero(valid)
    np.add.at(dx, (batch_idx[rr], cc, argmax[valid]), dy[valid])
    return dx.reshape(n, c, h, w)
