"""The compiled and pure-numpy kernels must agree bit for bit."""
import numpy as np
import pytest

from iodcnn import kernels
from iodcnn.layers import map_rois
from iodcnn.gradcheck import random_rois
from iodcnn.tensor import make_rng

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_im2col_col2im_parity(dtype, stride, pad):
    rng = make_rng(1)
    x = np.pad(rng.normal(size=(2, 3, 7, 9)), ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(dtype)
    oh, ow = (x.shape[2] - 3) // stride + 1, (x.shape[3] - 3) // stride + 1
    a = BACKENDS["compiled"].im2col(x, 3, 3, stride, oh, ow)
    b = BACKENDS["python"].im2col(x, 3, 3, stride, oh, ow)
    assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    cols = rng.normal(size=a.shape).astype(dtype)
    ra = BACKENDS["compiled"].col2im(cols, 2, 3, x.shape[2], x.shape[3], 3, 3, stride, oh, ow)
    rb = BACKENDS["python"].col2im(cols, 2, 3, x.shape[2], x.shape[3], 3, 3, stride, oh, ow)
    assert np.allclose(ra, rb, rtol=1e-6 if dtype == np.float32 else 1e-12)


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_maxpool_parity(dtype):
    rng = make_rng(2)
    x = rng.integers(0, 4, size=(2, 3, 8, 10)).astype(dtype)  # plenty of ties
    ya, aa = BACKENDS["compiled"].maxpool_forward(x, 2, 2)
    yb, ab = BACKENDS["python"].maxpool_forward(x, 2, 2)
    assert ya.tobytes() == yb.tobytes() and np.array_equal(aa, ab)
    dy = rng.normal(size=ya.shape).astype(dtype)
    assert BACKENDS["compiled"].maxpool_backward(dy, aa, 8, 10).tobytes() == \
        BACKENDS["python"].maxpool_backward(dy, ab, 8, 10).tobytes()


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("seed", range(5))
def test_roi_pool_parity(dtype, seed):
    rng = make_rng(seed, 3)
    feat = rng.integers(0, 5, size=(2, 4, 9, 12)).astype(dtype)
    boxes = map_rois(random_rois(rng, 12, 2, 48, 36), 0.25, 9, 12)
    ya, aa = BACKENDS["compiled"].roi_pool_forward(feat, boxes, 3, 3)
    yb, ab = BACKENDS["python"].roi_pool_forward(feat, boxes, 3, 3)
    assert ya.tobytes() == yb.tobytes() and np.array_equal(aa, ab)
    dy = rng.normal(size=ya.shape).astype(dtype)
    ga = BACKENDS["compiled"].roi_pool_backward(dy, aa, boxes[:, 0], 2, 9, 12)
    gb = BACKENDS["python"].roi_pool_backward(dy, ab, boxes[:, 0], 2, 9, 12)
    assert np.allclose(ga, gb, rtol=1e-6, atol=1e-6)
