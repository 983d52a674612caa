"""Finite-difference checks of every layer's backward pass and of a whole tiny network."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import network as N
from .tensor import finite_diff_check, make_rng

LAYER_TOL = 1e-5
NETWORK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    passed: bool
    max_abs_error: float = 0.0


def _projection(shape, rng):
    """Random weights turning a tensor output into a scalar objective."""
    return rng.normal(size=shape)


def _tie_free(shape, rng):
    # distinct values spaced well above the finite-difference step
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(0.2, 0.8, n)) * 0.01
    return vals.reshape(shape)


def _run(name, seed, checks):
    worst, worst_abs, ok = 0.0, 0.0, True
    for f, x, g, tol in checks:
        r = finite_diff_check(f, x, g, tol=tol)
        worst = max(worst, r.max_rel_error)
        worst_abs = max(worst_abs, r.max_abs_error)
        ok = ok and r.passed
    return CheckResult(name, seed, worst, ok, worst_abs)


def check_conv2d(seed: int) -> CheckResult:
    rng = make_rng(seed, 100)
    stride, pad = [(1, 0), (1, 1), (2, 1)][seed % 3]
    h = 5 if stride == 1 else 7
    x = rng.normal(size=(2, 3, h, h))
    p = L.ConvParams(rng.normal(size=(4, 3, 3, 3)) * 0.5, rng.normal(size=4), stride, pad)
    y, cache = L.conv2d_forward(x, p)
    proj = _projection(y.shape, rng)
    dx, dw, db = L.conv2d_backward(proj, cache)
    f = lambda _: float((L.conv2d_forward(x, p)[0] * proj).sum())
    return _run("conv2d", seed, [(f, x, dx, LAYER_TOL), (f, p.weights, dw, LAYER_TOL), (f, p.bias, db, LAYER_TOL)])


def check_relu(seed: int) -> CheckResult:
    rng = make_rng(seed, 101)
    x = rng.normal(size=(3, 7))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    y, mask = L.relu_forward(x)
    proj = _projection(y.shape, rng)
    f = lambda _: float((L.relu_forward(x)[0] * proj).sum())
    return _run("relu", seed, [(f, x, L.relu_backward(proj, mask), LAYER_TOL)])


def check_maxpool2d(seed: int) -> CheckResult:
    rng = make_rng(seed, 102)
    x = _tie_free((1, 2, 6, 6), rng)
    y, cache = L.maxpool2d_forward(x, 2, 2)
    proj = _projection(y.shape, rng)
    f = lambda _: float((L.maxpool2d_forward(x, 2, 2)[0] * proj).sum())
    return _run("maxpool2d", seed, [(f, x, L.maxpool2d_backward(proj, cache), LAYER_TOL)])


def check_fully_connected(seed: int) -> CheckResult:
    rng = make_rng(seed, 103)
    x = rng.normal(size=(3, 2, 2, 2))
    p = L.FcParams(rng.normal(size=(5, 8)), rng.normal(size=5))
    y, cache = L.fc_forward(x, p)
    proj = _projection(y.shape, rng)
    dx, dw, db = L.fc_backward(proj, cache)
    f = lambda _: float((L.fc_forward(x, p)[0] * proj).sum())
    return _run("fully_connected", seed, [(f, x, dx, LAYER_TOL), (f, p.weights, dw, LAYER_TOL), (f, p.bias, db, LAYER_TOL)])


def random_rois(rng, n_rois, batch, width, height):
    rows = []
    for _ in range(n_rois):
        x1, x2 = sorted(rng.uniform(0, width, 2))
        y1, y2 = sorted(rng.uniform(0, height, 2))
        rows.append((int(rng.integers(batch)), x1, y1, max(x2, x1 + 0.5), max(y2, y1 + 0.5)))
    return np.array(rows)


def check_roi_pool(seed: int) -> CheckResult:
    rng = make_rng(seed, 104)
    feat = _tie_free((2, 3, 8, 8), rng)
    spec = L.RoiPoolSpec(3, 2, 0.5)
    rois = random_rois(rng, 6, 2, 16, 16)
    y, cache = L.roi_pool_forward(feat, rois, spec)
    proj = _projection(y.shape, rng)
    f = lambda _: float((L.roi_pool_forward(feat, rois, spec)[0] * proj).sum())
    return _run("roi_pool", seed, [(f, feat, L.roi_pool_backward(proj, cache), LAYER_TOL)])


def check_softmax_cross_entropy(seed: int) -> CheckResult:
    rng = make_rng(seed, 105)
    logits = rng.normal(size=(5, 3)) * 2
    labels = rng.integers(0, 3, size=5)
    _, d = L.softmax_cross_entropy(logits, labels)
    f = lambda z: L.softmax_cross_entropy(z, labels)[0]
    return _run("softmax_cross_entropy", seed, [(f, logits, d, 1e-6)])


def tiny_spec() -> N.NetworkSpec:
    bb = N.BackboneSpec((N.ConvStage(3), N.ConvStage(4)))
    return N.make_spec(backbone=bb, fc6_dim=8, fc7_dim=6, pooled=2, init_std="he", fc7_std=0.4, fc8_std=0.5)


def network_problem(seed: int):
    """Tiny float64 unified network with random images, RoIs and labels."""
    rng = make_rng(seed, 106)
    net = N.build(tiny_spec(), rng, np.float64)
    h, w = 10, 11
    x = rng.normal(size=(2, 3, h, w))
    rois = {
        "event": np.array([[0, 0, 0, w, h], [1, 0, 0, w, h]], dtype=np.float64),
        "rigid": random_rois(rng, 6, 2, w, h),
        "nonrigid": random_rois(rng, 4, 2, w, h),
    }
    labels = {
        "event": np.array([0, 1]),
        "rigid": rng.integers(0, 4, size=6),
        "nonrigid": rng.integers(0, 3, size=4),
    }
    return net, x, rois, labels


def check_network(seed: int) -> CheckResult:
    net, x, rois, labels = network_problem(seed)
    _, _, grads = net.loss_and_grads(x, rois, labels)

    def f(_):
        logits = net.forward_train(x, rois)
        return sum(L.softmax_cross_entropy(logits[t], labels[t])[0] for t in logits)

    checks = [(f, net.params[k], grads[k], NETWORK_TOL) for k in sorted(net.params)]
    checks.append((f, x, _input_grad(net, x, rois, labels), NETWORK_TOL))
    return _run("network", seed, checks)


def _input_grad(net, x, rois, labels):
    logits = net.forward_train(x, rois)
    d = {t: L.softmax_cross_entropy(logits[t], labels[t])[1] for t in logits}
    bcache, scache, shape = net._cache
    dfeat = np.zeros(shape)
    for t in d:
        dfeat += net.stream_backward(d[t], scache[t], t, {})
    net._cache = None
    return net.backbone_backward(dfeat, bcache, {})


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "maxpool2d": check_maxpool2d,
    "fully_connected": check_fully_connected,
    "roi_pool": check_roi_pool,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "network": check_network,
}


def run_suite(seeds=range(20), names=None, report=None):
    """Run every check for every seed; ``report`` receives each CheckResult as it finishes."""
    results = []
    t0 = time.perf_counter()
    for name in names or LAYER_CHECKS:
        for seed in seeds:
            r = LAYER_CHECKS[name](seed)
            results.append(r)
            if report:
                report(r)
    return results, time.perf_counter() - t0
