"""Shared-backbone multi-task network: single-task event, rigid, non-rigid and unified.

All streams share the conv backbone, one RoI pooling layer and ``fc6``;
each task owns its ``fc7``/``fc8``.  At test time only the event stream runs.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .tensor import TRAIN_DTYPE, gaussian_init

TASKS = ("event", "rigid", "nonrigid")
# whole-image classification head used only for backbone pretraining
PRETRAIN_TASK = "scene"
WHOLE_IMAGE_TASKS = ("event", PRETRAIN_TASK)

RIGID_CLASSES = ("police", "helmet", "car")
NONRIGID_CLASSES = ("fire", "smoke")
EVENT_CLASSES = ("benign", "malicious")

MAGIC = b"IODC"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ConvStage:
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    pool: bool = True


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[ConvStage, ...]
    in_ch: int = 3
    pool_window: int = 2

    @classmethod
    def preset(cls, name: str) -> "BackboneSpec":
        if name == "tiny":
            return cls(tuple(ConvStage(c) for c in (16, 32, 64)))
        if name == "alexnet-like":
            return cls((
                ConvStage(64, 5, 1, 2, True),
                ConvStage(128, 5, 1, 2, True),
                ConvStage(192, 3, 1, 1, False),
                ConvStage(192, 3, 1, 1, False),
                ConvStage(128, 3, 1, 1, True),
            ))
        raise ValueError(f"unknown backbone preset {name!r}")

    @property
    def downsample(self) -> int:
        f = 1
        for s in self.stages:
            f *= s.stride * (self.pool_window if s.pool else 1)
        return f

    @property
    def spatial_scale(self) -> float:
        return 1.0 / self.downsample

    def feature_size(self, h: int, w: int) -> tuple[int, int]:
        for s in self.stages:
            h = L.conv_output_size(h, s.kernel, s.stride, s.pad)
            w = L.conv_output_size(w, s.kernel, s.stride, s.pad)
            if s.pool:
                h = (h - self.pool_window) // self.pool_window + 1
                w = (w - self.pool_window) // self.pool_window + 1
        return h, w


@dataclass(frozen=True)
class HeadSpec:
    task: str
    fc7_dim: int = 64
    num_classes: int = 2

    def __post_init__(self):
        if self.task not in TASKS + (PRETRAIN_TASK,):
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_classes < 2:
            raise ValueError(f"head {self.task}: num_classes must be >= 2")
        if self.fc7_dim < 1:
            raise ValueError(f"head {self.task}: fc7_dim must be >= 1")


def default_head(task: str, fc7_dim: int = 64) -> HeadSpec:
    classes = {"event": 2, "rigid": len(RIGID_CLASSES) + 1, "nonrigid": len(NONRIGID_CLASSES) + 1}
    return HeadSpec(task, fc7_dim, classes[task])


@dataclass(frozen=True)
class NetworkSpec:
    backbone: BackboneSpec
    heads: tuple[HeadSpec, ...]
    fc6_dim: int = 128
    pooled: int = 6
    init_std: float | str = 0.01  # conv + fc6; "he" = sqrt(2 / fan_in)
    fc7_std: float = 0.01
    fc8_std: float = 0.1

    def __post_init__(self):
        if not self.heads:
            raise ValueError("network needs at least one head")
        names = [h.task for h in self.heads]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate heads {names}")
        if self.fc6_dim < 1 or self.pooled < 1:
            raise ValueError("fc6_dim and pooled must be positive")
        if self.backbone.downsample & (self.backbone.downsample - 1):
            raise ValueError(f"backbone downsampling {self.backbone.downsample} is not a power of two")

    @property
    def roi_pool(self) -> L.RoiPoolSpec:
        return L.RoiPoolSpec(self.pooled, self.pooled, self.backbone.spatial_scale)

    @property
    def min_input_size(self) -> int:
        return self.backbone.downsample * self.pooled

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(h.task for h in self.heads)

    def head(self, task: str) -> HeadSpec:
        for h in self.heads:
            if h.task == task:
                return h
        raise KeyError(task)

    def with_heads(self, heads) -> "NetworkSpec":
        return replace(self, heads=tuple(heads))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        bb = d["backbone"]
        backbone = BackboneSpec(
            tuple(ConvStage(**s) for s in bb["stages"]), bb.get("in_ch", 3), bb.get("pool_window", 2)
        )
        heads = tuple(HeadSpec(**h) for h in d["heads"])
        rest = {k: d[k] for k in ("fc6_dim", "pooled", "init_std", "fc7_std", "fc8_std") if k in d}
        return cls(backbone, heads, **rest)


def make_spec(heads=TASKS, backbone="tiny", fc6_dim=128, fc7_dim=64, pooled=6, **kw) -> NetworkSpec:
    bb = BackboneSpec.preset(backbone) if isinstance(backbone, str) else backbone
    hs = tuple(h if isinstance(h, HeadSpec) else default_head(h, fc7_dim) for h in heads)
    return NetworkSpec(bb, hs, fc6_dim, pooled, **kw)


def head_param_paths(task: str) -> list[str]:
    return [f"head-{task}/{layer}/{kind}" for layer in ("fc7", "fc8") for kind in ("weights", "bias")]


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    pixel_mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    pixel_std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))
    op_count: int = 0

    def __post_init__(self):
        self._cache = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # -- building blocks -------------------------------------------------

    def _conv(self, i: int) -> L.ConvParams:
        s = self.spec.backbone.stages[i]
        p = self.params
        return L.ConvParams(p[f"backbone/conv{i + 1}/weights"], p[f"backbone/conv{i + 1}/bias"], s.stride, s.pad)

    def _fc(self, prefix: str) -> L.FcParams:
        return L.FcParams(self.params[f"{prefix}/weights"], self.params[f"{prefix}/bias"])

    def preprocess(self, image_hwc) -> np.ndarray:
        """uint8 ``[H, W, C]`` image -> normalized ``[C, H, W]`` array in the network dtype."""
        x = np.asarray(image_hwc, dtype=np.float64) / 255.0
        x = (x - self.pixel_mean.astype(np.float64)) / self.pixel_std.astype(np.float64)
        return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=self.dtype)

    def check_input(self, h: int, w: int):
        m = self.spec.min_input_size
        if h < m or w < m:
            raise ValueError(f"input {w}x{h} is below the minimum size {m}x{m}")

    def backbone_forward(self, x):
        caches = []
        bb = self.spec.backbone
        for i, stage in enumerate(bb.stages):
            x, c_conv = L.conv2d_forward(x, self._conv(i))
            x, c_relu = L.relu_forward(x)
            c_pool = None
            self.op_count += 2
            if stage.pool:
                x, c_pool = L.maxpool2d_forward(x, bb.pool_window, bb.pool_window)
                self.op_count += 1
            caches.append((c_conv, c_relu, c_pool))
        return x, caches

    def backbone_backward(self, dx, caches, grads):
        for i in range(len(caches) - 1, -1, -1):
            c_conv, c_relu, c_pool = caches[i]
            if c_pool is not None:
                dx = L.maxpool2d_backward(dx, c_pool)
            dx = L.relu_backward(dx, c_relu)
            dx, dw, db = L.conv2d_backward(dx, c_conv)
            grads[f"backbone/conv{i + 1}/weights"] = dw
            grads[f"backbone/conv{i + 1}/bias"] = db
        return dx

    def stream_forward(self, feat, rois, task: str):
        """RoI pool -> fc6 (shared) -> fc7 -> fc8 for one task."""
        pooled, c_roi = L.roi_pool_forward(feat, rois, self.spec.roi_pool)
        h6, c6 = L.fc_forward(pooled, self._fc("shared/fc6"))
        a6, m6 = L.relu_forward(h6)
        h7, c7 = L.fc_forward(a6, self._fc(f"head-{task}/fc7"))
        a7, m7 = L.relu_forward(h7)
        logits, c8 = L.fc_forward(a7, self._fc(f"head-{task}/fc8"))
        self.op_count += 6
        return logits, (c_roi, c6, m6, c7, m7, c8), a7

    def stream_backward(self, dlogits, cache, task: str, grads):
        c_roi, c6, m6, c7, m7, c8 = cache
        d, grads[f"head-{task}/fc8/weights"], grads[f"head-{task}/fc8/bias"] = L.fc_backward(dlogits, c8)
        d = L.relu_backward(d, m7)
        d, grads[f"head-{task}/fc7/weights"], grads[f"head-{task}/fc7/bias"] = L.fc_backward(d, c7)
        d = L.relu_backward(d, m6)
        d, dw6, db6 = L.fc_backward(d, c6)
        _accumulate(grads, "shared/fc6/weights", dw6)
        _accumulate(grads, "shared/fc6/bias", db6)
        return L.roi_pool_backward(d, c_roi)

    # -- training passes -------------------------------------------------

    def forward_train(self, images, rois_by_task: dict) -> dict[str, np.ndarray]:
        """One backbone pass, then one RoI-pool + FC stream per task in ``rois_by_task``.

        ``rois_by_task`` maps task -> ``[R, 5]`` (batch_idx, x1, y1, x2, y2).
        Every task passed must have a head; heads absent from the map are
        skipped, which is how a cascade stage deactivates streams.
        """
        images = np.ascontiguousarray(images, dtype=self.dtype)
        if images.ndim != 4:
            raise ValueError(f"image batch must be [N,C,H,W], got {images.shape}")
        if not rois_by_task:
            raise ValueError("rois_by_task is empty")
        for task in rois_by_task:
            if task not in self.spec.tasks:
                raise ValueError(f"network has no {task!r} head")
        self.check_input(*images.shape[2:])
        feat, bcache = self.backbone_forward(images)
        out, scache = {}, {}
        for task, rois in rois_by_task.items():
            rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
            if rois.shape[0] == 0:
                raise ValueError(f"no RoIs supplied for task {task!r}")
            out[task], scache[task], _ = self.stream_forward(feat, rois, task)
        self._cache = (bcache, scache, feat.shape)
        return out

    def backward_train(self, dlogits_by_task: dict, weights: dict | None = None) -> dict[str, np.ndarray]:
        """Gradients of ``sum_t w_t * loss_t`` given each stream's dloss/dlogits.

        Shared parameters (backbone, fc6) receive the sum of the streams'
        contributions; each head only sees its own stream.
        """
        if self._cache is None:
            raise RuntimeError("backward_train called without a preceding forward_train")
        bcache, scache, feat_shape = self._cache
        grads: dict[str, np.ndarray] = {}
        dfeat = np.zeros(feat_shape, dtype=self.dtype)
        for task, dlogits in dlogits_by_task.items():
            if task not in scache:
                raise ValueError(f"no forward cache for task {task!r}")
            w = 1.0 if weights is None else weights.get(task, 1.0)
            if w == 0:
                continue
            d = dlogits if w == 1.0 else dlogits * w
            dfeat += self.stream_backward(np.asarray(d, dtype=self.dtype), scache[task], task, grads)
        self.backbone_backward(dfeat, bcache, grads)
        self._cache = None
        for k, v in grads.items():
            if v.dtype != self.dtype:
                grads[k] = v.astype(self.dtype)
        return grads

    def loss_and_grads(self, images, rois_by_task, labels_by_task, weights=None):
        """Forward, per-task softmax loss, backward.  Returns (losses, total, grads)."""
        logits = self.forward_train(images, rois_by_task)
        losses, dlogits = {}, {}
        for task, lg in logits.items():
            losses[task], dlogits[task] = L.softmax_cross_entropy(lg, labels_by_task[task])
        weights = weights or {}
        total = sum(weights.get(t, 1.0) * v for t, v in losses.items())
        return losses, total, self.backward_train(dlogits, weights)

    # -- inference --------------------------------------------------------

    def _whole_image(self, image, task: str):
        x = np.asarray(image, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[0] != 1:
            raise ValueError(f"expected one [C,H,W] image, got {np.shape(image)}")
        if task not in self.spec.tasks:
            raise ValueError(f"network has no {task!r} head")
        h, w = x.shape[2:]
        self.check_input(h, w)
        feat, _ = self.backbone_forward(np.ascontiguousarray(x))
        logits, _, fc7 = self.stream_forward(feat, np.array([[0, 0, 0, w, h]], dtype=np.float64), task)
        return logits[0], fc7[0]

    def forward_infer(self, image, task: str = "event") -> np.ndarray:
        """Softmax scores over the task's classes using the whole image as the RoI."""
        logits, _ = self._whole_image(image, task)
        return L.softmax(logits.astype(np.float64))

    def fc7_features(self, image, task: str = "event") -> np.ndarray:
        return self._whole_image(image, task)[1].astype(np.float64)

    def classify_rois(self, image, rois, task: str) -> np.ndarray:
        """Softmax scores ``[R, K]`` for image-pixel boxes ``[R, 4]`` on one image."""
        x = np.asarray(image, dtype=self.dtype)[None]
        self.check_input(*x.shape[2:])
        feat, _ = self.backbone_forward(np.ascontiguousarray(x))
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        full = np.concatenate([np.zeros((len(rois), 1)), rois], axis=1)
        logits, _, _ = self.stream_forward(feat, full, task)
        return L.softmax(logits.astype(np.float64))


def _accumulate(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def build(spec: NetworkSpec, rng, dtype=TRAIN_DTYPE) -> Network:
    """Fresh network: conv/fc6 ~ N(0, init_std), fc7 ~ N(0, fc7_std), fc8 ~ N(0, fc8_std), zero biases."""
    params: dict[str, np.ndarray] = {}
    in_ch = spec.backbone.in_ch
    for i, s in enumerate(spec.backbone.stages):
        if s.kernel < 1 or s.stride < 1 or s.pad < 0 or s.out_ch < 1:
            raise ValueError(f"conv stage {i + 1} has invalid geometry {s}")
        params[f"backbone/conv{i + 1}/weights"] = _init((s.out_ch, in_ch, s.kernel, s.kernel), spec.init_std, rng, dtype)
        params[f"backbone/conv{i + 1}/bias"] = np.zeros(s.out_ch, dtype=dtype)
        in_ch = s.out_ch
    m = spec.min_input_size
    fh, fw = spec.backbone.feature_size(m, m)
    if fh < 1 or fw < 1:
        raise ValueError(f"backbone collapses a {m}x{m} input to nothing")
    fc6_in = in_ch * spec.pooled * spec.pooled
    params["shared/fc6/weights"] = _init((spec.fc6_dim, fc6_in), spec.init_std, rng, dtype)
    params["shared/fc6/bias"] = np.zeros(spec.fc6_dim, dtype=dtype)
    for h in spec.heads:
        params.update(_init_head(spec, h, rng, dtype))
    return Network(spec, params)


def _init(shape, std, rng, dtype):
    if std == "he":
        std = math.sqrt(2.0 / math.prod(shape[1:]))
    return gaussian_init(shape, 0.0, float(std), rng, dtype)


def _init_head(spec: NetworkSpec, h: HeadSpec, rng, dtype) -> dict[str, np.ndarray]:
    pre = f"head-{h.task}"
    return {
        f"{pre}/fc7/weights": _init((h.fc7_dim, spec.fc6_dim), spec.fc7_std, rng, dtype),
        f"{pre}/fc7/bias": np.zeros(h.fc7_dim, dtype=dtype),
        f"{pre}/fc8/weights": gaussian_init((h.num_classes, h.fc7_dim), 0.0, spec.fc8_std, rng, dtype),
        f"{pre}/fc8/bias": np.zeros(h.num_classes, dtype=dtype),
    }


def warm_start(source: Network, spec: NetworkSpec, rng, dtype=None) -> Network:
    """New network for ``spec`` carrying over the backbone, fc6 and normalization.

    Heads are always freshly initialized, even when the source has a head of
    the same name.
    """
    net = build(spec, rng, dtype or source.dtype)
    for k, v in source.params.items():
        if not (k.startswith("backbone/") or k.startswith("shared/")):
            continue
        if k not in net.params:
            raise CheckpointError(f"parameter {k} has no counterpart in the target spec")
        if net.params[k].shape != v.shape:
            raise CheckpointError(f"parameter {k}: shape {v.shape} != target {net.params[k].shape}")
        net.params[k] = v.astype(net.dtype, copy=True)
    net.pixel_mean = source.pixel_mean.copy()
    net.pixel_std = source.pixel_std.copy()
    return net


# -- checkpoint file --------------------------------------------------------
#
# little-endian:
#   b"IODC" | u32 version | u32 len | spec JSON (utf-8) | u32 n_records
#   n_records x (u16 len | path utf-8 | u8 ndim | u32 dims[ndim] | f32 data)
#   u32 crc32 of every preceding byte


def checkpoint_bytes(net: Network) -> bytes:
    records = dict(sorted(net.params.items()))
    records["meta/pixel_mean"] = net.pixel_mean
    records["meta/pixel_std"] = net.pixel_std
    spec_json = json.dumps(net.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(spec_json)), spec_json, struct.pack("<I", len(records))]
    for path, arr in records.items():
        p = path.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(p)) + p + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(net: Network, path):
    atomic_write(path, checkpoint_bytes(net))


def parse_checkpoint(data: bytes):
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not an IODC checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    version, n = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 12
    try:
        spec = NetworkSpec.from_dict(json.loads(body[pos : pos + n].decode()))
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (plen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            path = body[pos : pos + plen].decode()
            pos += plen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = 4 * math.prod(shape)
            if pos + size > len(body):
                raise CheckpointError(f"record {path} runs past end of file")
            tensors[path] = np.frombuffer(body, dtype="<f4", count=math.prod(shape), offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    return spec, tensors


def load(path, spec: NetworkSpec | None = None, rng=None, dtype=TRAIN_DTYPE) -> Network:
    """Load a checkpoint.  With a different ``spec``, warm-start into it instead."""
    stored_spec, tensors = parse_checkpoint(Path(path).read_bytes())
    mean = tensors.pop("meta/pixel_mean", np.zeros(3, np.float32))
    std = tensors.pop("meta/pixel_std", np.ones(3, np.float32))
    ref = build(stored_spec, np.random.default_rng(0), dtype)
    if set(ref.params) != set(tensors):
        missing = sorted(set(ref.params) ^ set(tensors))
        raise CheckpointError(f"checkpoint parameters do not match its spec: {missing[:4]}")
    for k, v in tensors.items():
        if ref.params[k].shape != v.shape:
            raise CheckpointError(f"{k}: stored shape {v.shape} != spec shape {ref.params[k].shape}")
    net = Network(stored_spec, {k: v.astype(dtype) for k, v in tensors.items()}, mean, std)
    if spec is None or spec == stored_spec:
        return net
    if rng is None:
        raise ValueError("rng is required to initialize heads when loading into a different spec")
    return warm_start(net, spec, rng, dtype)
