"""Forward/backward passes for conv, ReLU, max pooling, FC, RoI pooling and softmax loss.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Gradients are hand-derived.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class ConvParams:
    weights: np.ndarray  # [out_ch, in_ch, kh, kw]
    bias: np.ndarray  # [out_ch]
    stride: int = 1
    pad: int = 0


@dataclass
class FcParams:
    weights: np.ndarray  # [out_dim, in_dim]
    bias: np.ndarray  # [out_dim]


@dataclass(frozen=True)
class RoiPoolSpec:
    out_h: int = 6
    out_w: int = 6
    spatial_scale: float = 1.0

    def __post_init__(self):
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError(f"pooled grid must be positive, got {self.out_h}x{self.out_w}")
        if not 0 < self.spatial_scale <= 1:
            raise ValueError(f"spatial_scale must be in (0, 1], got {self.spatial_scale}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv: extent {size} with pad {pad}, kernel {k}, stride {stride} does not tile exactly"
        )
    return span // stride + 1


def conv2d_forward(x, p: ConvParams):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W] input, got shape {x.shape}")
    o, c, kh, kw = p.weights.shape
    n, xc, h, w = x.shape
    if xc != c:
        raise ValueError(f"conv2d: input channels {xc} != weight in_ch {c}")
    if p.bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {p.bias.shape} != ({o},)")
    out_h = conv_output_size(h, kh, p.stride, p.pad)
    out_w = conv_output_size(w, kw, p.stride, p.pad)
    xp = np.pad(x, ((0, 0), (0, 0), (p.pad, p.pad), (p.pad, p.pad))) if p.pad else x
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, p.stride, out_h, out_w)
    w2 = p.weights.reshape(o, -1)
    y = np.matmul(w2, cols) + p.bias[None, :, None]
    return y.reshape(n, o, out_h, out_w), (cols, x.shape, p)


def conv2d_backward(dy, cache):
    cols, x_shape, p = cache
    o, c, kh, kw = p.weights.shape
    n, _, h, w = x_shape
    out_h, out_w = dy.shape[2:]
    dy2 = dy.reshape(n, o, out_h * out_w)
    dw = np.einsum("nol,nkl->ok", dy2, cols).reshape(p.weights.shape)
    db = dy2.sum(axis=(0, 2))
    dcols = np.matmul(p.weights.reshape(o, -1).T, dy2)
    hp, wp = h + 2 * p.pad, w + 2 * p.pad
    dxp = kernels.col2im(dcols, n, c, hp, wp, kh, kw, p.stride, out_h, out_w)
    dx = dxp[:, :, p.pad : p.pad + h, p.pad : p.pad + w] if p.pad else dxp
    return np.ascontiguousarray(dx), dw.astype(p.weights.dtype), db.astype(p.bias.dtype)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def maxpool2d_forward(x, window: int = 2, stride: int = 2):
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects [N,C,H,W] input, got shape {x.shape}")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise ValueError(f"maxpool2d: window {window} larger than input {h}x{w}")
    y, argmax = kernels.maxpool_forward(np.ascontiguousarray(x), window, stride)
    return y, (argmax, x.shape)


def maxpool2d_backward(dy, cache):
    argmax, (n, c, h, w) = cache
    return kernels.maxpool_backward(np.ascontiguousarray(dy), argmax, h, w)


def fc_forward(x, p: FcParams):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    out_dim, in_dim = p.weights.shape
    if flat.shape[1] != in_dim:
        raise ValueError(f"fully_connected: input dim {flat.shape[1]} != weight in_dim {in_dim}")
    return flat @ p.weights.T + p.bias, (flat, x.shape, p)


def fc_backward(dy, cache):
    flat, x_shape, p = cache
    dx = (dy @ p.weights).reshape(x_shape)
    return dx, dy.T @ flat, dy.sum(axis=0)


def map_rois(rois, spatial_scale: float, fh: int, fw: int) -> np.ndarray:
    """Image-pixel RoIs ``[R, 5]`` (batch, x1, y1, x2, y2) -> integer feature cells.

    Start corners floor, end corners ceil, everything clamped to the map with a
    one-cell minimum.  End coordinates are exclusive.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    out = np.empty((rois.shape[0], 5), dtype=np.int64)
    out[:, 0] = rois[:, 0]
    x1 = np.clip(np.floor(rois[:, 1] * spatial_scale), 0, fw - 1).astype(np.int64)
    y1 = np.clip(np.floor(rois[:, 2] * spatial_scale), 0, fh - 1).astype(np.int64)
    x2 = np.minimum(np.ceil(rois[:, 3] * spatial_scale), fw).astype(np.int64)
    y2 = np.minimum(np.ceil(rois[:, 4] * spatial_scale), fh).astype(np.int64)
    out[:, 1], out[:, 2] = x1, y1
    out[:, 3] = np.maximum(x2, x1 + 1)
    out[:, 4] = np.maximum(y2, y1 + 1)
    return out


def roi_pool_forward(feat, rois, spec: RoiPoolSpec):
    if feat.ndim != 4:
        raise ValueError(f"roi_pool expects [N,C,H,W] features, got shape {feat.shape}")
    n, _, fh, fw = feat.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    bidx = rois[:, 0]
    if np.any(bidx < 0) or np.any(bidx >= n) or np.any(bidx != np.floor(bidx)):
        raise ValueError(f"roi_pool: batch index out of range for batch of {n}")
    if np.any(rois[:, 3] <= rois[:, 1]) or np.any(rois[:, 4] <= rois[:, 2]):
        raise ValueError("roi_pool: RoIs need x2 > x1 and y2 > y1")
    boxes = map_rois(rois, spec.spatial_scale, fh, fw)
    y, argmax = kernels.roi_pool_forward(np.ascontiguousarray(feat), boxes, spec.out_h, spec.out_w)
    return y, (argmax, boxes[:, 0].copy(), feat.shape)


def roi_pool_backward(dy, cache):
    argmax, bidx, (n, c, h, w) = cache
    return kernels.roi_pool_backward(np.ascontiguousarray(dy), argmax, bidx, n, h, w)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    r, k = logits.shape
    if labels.shape[0] != r:
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {r} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_cross_entropy: labels must be in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(r), labels] - log_norm
    loss = float(-logp.mean())
    probs = np.exp(z - log_norm[:, None])
    probs[np.arange(r), labels] -= 1
    return loss, (probs / r).astype(logits.dtype)

