"""Two-image batches, momentum SGD with step decay, and the three-stage cascade."""
from __future__ import annotations

import csv
import fnmatch
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import network as N
from .data import SCENE_CLASSES, Dataset, generate_scenes, pad_batch
from .rois import Box, LabeledRoi, boxes_to_array, grid_proposals, label_rois, multiscale_windows, sample_rois
from .tensor import make_rng

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

RIGID_IOU = 0.5
NONRIGID_IOU = 0.2
LOG_FIELDS = ("iter", "stage", "lr", "loss_event", "loss_rigid", "loss_nonrigid", "loss_total")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass(frozen=True)
class StageConfig:
    name: str
    base_lr: float
    iterations: int
    step_size: int
    gamma: float = 0.1
    trainable: tuple[str, ...] = ("*",)
    active_heads: tuple[str, ...] = N.TASKS
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.iterations < 0 or self.step_size < 1:
            raise ConfigError(f"stage {self.name}: iterations must be >= 0 and step_size >= 1")
        if self.iterations and self.step_size > self.iterations:
            raise ConfigError(f"stage {self.name}: step_size {self.step_size} exceeds iterations {self.iterations}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"stage {self.name}: gamma must be in (0, 1]")
        if not self.active_heads:
            raise ConfigError(f"stage {self.name}: no active heads")

    def is_trainable(self, path: str) -> bool:
        return any(fnmatch.fnmatchcase(path, pat) for pat in self.trainable)


def lr_at(stage: StageConfig, it: int) -> float:
    return stage.base_lr * stage.gamma ** (it // stage.step_size)


class SGD:
    """Momentum SGD: ``v = m*v + g + wd*w``; ``w -= lr*v``.

    Only parameters that received a gradient and pass ``trainable`` move, so
    heads outside the active stage stay bit-exact (no weight decay either).
    """

    def __init__(self, momentum=0.9, weight_decay=0.0005):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr, trainable=lambda path: True):
        for path, g in grads.items():
            if not trainable(path):
                continue
            w = params[path]
            if g.shape != w.shape:
                raise ValueError(f"gradient for {path} has shape {g.shape}, parameter has {w.shape}")
            v = self.velocity.get(path)
            upd = g + self.weight_decay * w if self.weight_decay else g.copy()
            if v is not None and self.momentum:
                upd += self.momentum * v
            self.velocity[path] = upd
            w -= (lr * upd).astype(w.dtype)


def sgd_step(net, grads, lr, momentum=0.0, weight_decay=0.0, optimizer=None, trainable=lambda p: True):
    opt = optimizer or SGD(momentum, weight_decay)
    opt.step(net.params, grads, lr, trainable)
    return net


# -- batches --------------------------------------------------------------------

@dataclass
class BatchPlan:
    images: tuple[int, int]
    rois: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]

    def counts(self) -> tuple[int, ...]:
        return tuple(len(self.labels[t]) for t in N.TASKS if t in self.labels)


@dataclass
class RoiPlanner:
    """Per-image RoI labeling, cached across iterations."""

    dataset: Dataset
    rigid_per_image: int = 64
    fg_fraction: float = 0.25
    rigid_iou: float = RIGID_IOU
    nonrigid_iou: float = NONRIGID_IOU
    add_gt_to_proposals: bool = True
    _rigid: dict = field(default_factory=dict, repr=False)
    _nonrigid: dict = field(default_factory=dict, repr=False)

    def rigid_pool(self, i: int) -> list[LabeledRoi]:
        if i not in self._rigid:
            w, h = self.dataset.size(i)
            name = self.dataset.manifest.entries[i].image
            props = list(self.dataset.proposals.get(name) or grid_proposals(w, h))
            gt = self.dataset.rigid_gt(i)
            if self.add_gt_to_proposals:
                props += [Box(*b.coords) for b in gt]
            self._rigid[i] = label_rois(props, gt, self.rigid_iou)
        return self._rigid[i]

    def nonrigid_rois(self, i: int) -> list[LabeledRoi]:
        if i not in self._nonrigid:
            w, h = self.dataset.size(i)
            self._nonrigid[i] = label_rois(multiscale_windows(w, h), self.dataset.nonrigid_gt(i), self.nonrigid_iou)
        return self._nonrigid[i]


def compose_batch(planner: RoiPlanner, rng, tasks=N.TASKS) -> BatchPlan:
    """One benign and one malicious image with per-task RoIs and labels."""
    ds = planner.dataset
    benign, malicious = ds.manifest.indices("benign"), ds.manifest.indices("malicious")
    if not benign or not malicious:
        raise ConfigError("dataset needs at least one benign and one malicious image")
    pair = (benign[int(rng.integers(len(benign)))], malicious[int(rng.integers(len(malicious)))])
    rois = {t: [] for t in tasks}
    labels = {t: [] for t in tasks}
    for b, i in enumerate(pair):
        w, h = ds.size(i)
        if "event" in rois:
            rois["event"].append(np.array([[b, 0, 0, w, h]], dtype=np.float64))
            labels["event"].append([ds.event_label(i)])
        if "rigid" in rois:
            picked = sample_rois(planner.rigid_pool(i), planner.rigid_per_image, planner.fg_fraction, rng)
            rois["rigid"].append(boxes_to_array([r.box for r in picked], b))
            labels["rigid"].append([r.label for r in picked])
        if "nonrigid" in rois:
            windows = planner.nonrigid_rois(i)
            rois["nonrigid"].append(boxes_to_array([r.box for r in windows], b))
            labels["nonrigid"].append([r.label for r in windows])
    return BatchPlan(
        pair,
        {t: np.concatenate(v) for t, v in rois.items()},
        {t: np.concatenate([np.asarray(x, dtype=np.int64) for x in v]) for t, v in labels.items()},
    )


# -- stage loop -------------------------------------------------------------------

@dataclass
class PretrainConfig:
    """Synthetic scene classification standing in for large-scale pretraining."""

    count: int = 96
    batch_size: int = 8
    seed_offset: int = 1000


@dataclass
class CascadeResult:
    network: N.Network
    checkpoints: dict[str, bytes]
    log_rows: list[dict]

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def format_log(rows) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: ("" if r.get(k) is None else r[k]) for k in LOG_FIELDS})
    return buf.getvalue()


class _ImageCache:
    def __init__(self, net, images):
        self.net = net
        self.images = images
        self._cache = {}

    def __call__(self, i):
        if i not in self._cache:
            self._cache[i] = self.net.preprocess(self.images(i))
        return self._cache[i]


def _stage_row(stage, it, lr, losses, total):
    return {
        "iter": it,
        "stage": stage.name,
        "lr": repr(float(lr)),
        **{f"loss_{t}": repr(float(losses[t])) if t in losses else None for t in N.TASKS},
        "loss_total": repr(float(total)),
    }


def _check_finite(stage, it, total):
    if not np.isfinite(total):
        raise TrainingError(f"stage {stage.name}: non-finite loss at iteration {it}")


def _check_stages(spec, stages, dataset):
    for s in stages:
        if tuple(s.active_heads) == (N.PRETRAIN_TASK,):
            continue
        for t in s.active_heads:
            if t not in spec.tasks:
                raise ConfigError(f"stage {s.name}: head {t!r} not in network spec")
    if any(tuple(s.active_heads) != (N.PRETRAIN_TASK,) for s in stages):
        m = dataset.manifest
        if not m.indices("benign") or not m.indices("malicious"):
            raise ConfigError("dataset needs at least one benign and one malicious image")


def run_pretrain(net: N.Network, stage: StageConfig, cfg: PretrainConfig, seed: int, rows: list):
    images, labels = generate_scenes(cfg.count, seed + cfg.seed_offset)
    prep = _ImageCache(net, lambda i: images[i])
    opt = SGD(stage.momentum, stage.weight_decay)
    rng = make_rng(seed, 10)
    for it in range(stage.iterations):
        lr = lr_at(stage, it)
        idx = rng.choice(len(images), size=cfg.batch_size, replace=False)
        batch = pad_batch([prep(int(i)) for i in idx], net.dtype)
        rois = np.array([[b, 0, 0, images[i].shape[1], images[i].shape[0]] for b, i in enumerate(idx)], dtype=np.float64)
        losses, total, grads = net.loss_and_grads(batch, {N.PRETRAIN_TASK: rois}, {N.PRETRAIN_TASK: np.array([labels[i] for i in idx])})
        _check_finite(stage, it, total)
        opt.step(net.params, grads, lr, stage.is_trainable)
        rows.append(_stage_row(stage, it, lr, {}, total))


def run_stage(net: N.Network, stage: StageConfig, planner: RoiPlanner, rng, rows: list, loss_weights=None):
    for t in stage.active_heads:
        if t not in net.spec.tasks:
            raise ConfigError(f"stage {stage.name}: head {t!r} not in network spec")
    ds = planner.dataset
    prep = _ImageCache(net, ds.image)
    opt = SGD(stage.momentum, stage.weight_decay)
    for it in range(stage.iterations):
        lr = lr_at(stage, it)
        plan = compose_batch(planner, rng, stage.active_heads)
        batch = pad_batch([prep(i) for i in plan.images], net.dtype)
        losses, total, grads = net.loss_and_grads(batch, plan.rois, plan.labels, loss_weights)
        _check_finite(stage, it, total)
        opt.step(net.params, grads, lr, stage.is_trainable)
        rows.append(_stage_row(stage, it, lr, losses, total))


def validate_cascade(spec: N.NetworkSpec, stages):
    names = [s.name for s in stages]
    if len(stages) != 3:
        raise ConfigError(f"cascade needs exactly three stages (pretrain, rigid_only, unified), got {names}")
    pre, rigid, unified = stages
    if tuple(pre.active_heads) != (N.PRETRAIN_TASK,):
        raise ConfigError(f"stage {pre.name}: pretraining stage must activate only the {N.PRETRAIN_TASK!r} head")
    if tuple(rigid.active_heads) != ("rigid",):
        raise ConfigError(f"stage {rigid.name}: second stage must activate only the rigid head")
    if set(unified.active_heads) != set(spec.tasks):
        raise ConfigError(f"stage {unified.name}: unified stage must activate every head {spec.tasks}")
    for s in stages[1:]:
        for t in s.active_heads:
            if t not in spec.tasks:
                raise ConfigError(f"stage {s.name}: head {t!r} not in network spec")


def train_stages(dataset: Dataset, spec: N.NetworkSpec, stages, seed: int = 0, pretrain=None,
                 planner_kw=None, loss_weights=None, initial: N.Network | None = None) -> CascadeResult:
    """Run ``stages`` in order; a stage whose only head is ``scene`` is pretraining.

    Pretraining runs on its own network (backbone + fc6 + scene head) which
    is then warm-started into ``spec``.  Every later stage continues from the
    previous one's parameters.
    """
    _check_stages(spec, stages, dataset)
    pretrain = pretrain or PretrainConfig()
    rows: list[dict] = []
    ckpts: dict[str, bytes] = {}
    mean, std = dataset.stats()
    net = initial
    for k, stage in enumerate(stages):
        if tuple(stage.active_heads) == (N.PRETRAIN_TASK,):
            pspec = spec.with_heads([N.HeadSpec(N.PRETRAIN_TASK, spec.heads[0].fc7_dim, len(SCENE_CLASSES))])
            pnet = N.build(pspec, make_rng(seed, 20))
            pnet.pixel_mean, pnet.pixel_std = mean, std
            log.info("stage %s: %d iterations", stage.name, stage.iterations)
            run_pretrain(pnet, stage, pretrain, seed, rows)
            ckpts[stage.name] = N.checkpoint_bytes(pnet)
            net = N.warm_start(pnet, spec, make_rng(seed, 21))
            continue
        if net is None:
            net = N.build(spec, make_rng(seed, 21))
            net.pixel_mean, net.pixel_std = mean, std
        planner = RoiPlanner(dataset, **(planner_kw or {}))
        log.info("stage %s: %d iterations", stage.name, stage.iterations)
        run_stage(net, stage, planner, make_rng(seed, 30 + k), rows, loss_weights)
        ckpts[stage.name] = N.checkpoint_bytes(net)
    return CascadeResult(net, ckpts, rows)


def cascaded_train(dataset, spec, stages, seed=0, **kw) -> CascadeResult:
    validate_cascade(spec, stages)
    return train_stages(dataset, spec, stages, seed, **kw)


# -- configuration ------------------------------------------------------------------

def paper_stages() -> list[StageConfig]:
    """Published schedule: rigid-only 0.01 / 30k / step 20k, unified 0.0001 / 12k / step 8k."""
    return [
        StageConfig("pretrain", 0.01, 30000, 20000, active_heads=(N.PRETRAIN_TASK,)),
        StageConfig("rigid_only", 0.01, 30000, 20000, active_heads=("rigid",)),
        StageConfig("unified", 0.0001, 12000, 8000, active_heads=N.TASKS),
    ]


def desk_stages(unified_lr: float = 0.0001) -> list[StageConfig]:
    """Iteration counts scaled by 1/100 (pretraining shortened likewise)."""
    return [
        StageConfig("pretrain", 0.01, 300, 200, active_heads=(N.PRETRAIN_TASK,)),
        StageConfig("rigid_only", 0.01, 300, 200, active_heads=("rigid",)),
        StageConfig("unified", unified_lr, 120, 80, active_heads=N.TASKS),
    ]


def single_task_stages(task: str = "event", lr: float = 0.01, iterations: int = 120, step: int = 80) -> list[StageConfig]:
    """Baseline: the same pretraining followed by one stage training only ``task``."""
    return [
        StageConfig("pretrain", 0.01, 300, 200, active_heads=(N.PRETRAIN_TASK,)),
        StageConfig(f"{task}_only", lr, iterations, step, active_heads=(task,)),
    ]


def desk_spec(heads=N.TASKS) -> N.NetworkSpec:
    return N.make_spec(heads=heads, init_std="he")


STAGE_ORDER = ("pretrain", "rigid_only", "unified")


def stage_from_table(name: str, t: dict) -> StageConfig:
    known = {f for f in StageConfig.__dataclass_fields__} - {"name"}
    unknown = set(t) - known
    if unknown:
        raise ConfigError(f"stage {name}: unknown keys {sorted(unknown)}")
    kw = dict(t)
    for key in ("trainable", "active_heads"):
        if key in kw:
            kw[key] = tuple(kw[key])
    try:
        return StageConfig(name=name, **kw)
    except TypeError as exc:
        raise ConfigError(f"stage {name}: {exc}") from None


@dataclass
class TrainConfig:
    spec: N.NetworkSpec
    stages: list[StageConfig]
    seed: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rigid_per_image: int = 64
    fg_fraction: float = 0.25
    loss_weights: dict | None = None


def default_config() -> TrainConfig:
    return TrainConfig(desk_spec(), desk_stages())


def _reject_unknown(where: str, table: dict, known: set):
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def parse_config(text: str) -> TrainConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    _reject_unknown("top level", doc, {"seed", "network", "stages", "pretrain", "sampling", "loss_weights"})
    net = doc.get("network", {})
    _reject_unknown("[network]", net, {"heads", "backbone", "fc6_dim", "fc7_dim", "pooled", "init_std",
                                       "fc7_std", "fc8_std"})
    try:
        spec = N.make_spec(
            heads=tuple(net.get("heads", N.TASKS)),
            backbone=net.get("backbone", "tiny"),
            fc6_dim=int(net.get("fc6_dim", 128)),
            fc7_dim=int(net.get("fc7_dim", 64)),
            pooled=int(net.get("pooled", 6)),
            init_std=net.get("init_std", "he"),
            fc7_std=net.get("fc7_std", 0.01),
            fc8_std=float(net.get("fc8_std", 0.1)),
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[network]: {exc}") from None
    tables = doc.get("stages")
    if tables is None:
        if set(spec.tasks) == set(N.TASKS):
            stages = desk_stages()
        elif len(spec.tasks) == 1:
            stages = single_task_stages(spec.tasks[0])
        else:
            stages = []
    else:
        stages = [stage_from_table(name, t) for name, t in tables.items()]
    if not stages:
        raise ConfigError("no [stages.*] tables")
    try:
        pretrain = PretrainConfig(**doc.get("pretrain", {}))
    except TypeError as exc:
        raise ConfigError(f"[pretrain]: {exc}") from None
    samp = doc.get("sampling", {})
    _reject_unknown("[sampling]", samp, {"rigid_rois_per_image", "fg_fraction"})
    return TrainConfig(
        spec,
        stages,
        seed=int(doc.get("seed", 0)),
        pretrain=pretrain,
        rigid_per_image=int(samp.get("rigid_rois_per_image", 64)),
        fg_fraction=float(samp.get("fg_fraction", 0.25)),
        loss_weights=doc.get("loss_weights"),
    )


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def run_config(cfg: TrainConfig, dataset: Dataset) -> CascadeResult:
    kw = dict(
        seed=cfg.seed,
        pretrain=cfg.pretrain,
        planner_kw={"rigid_per_image": cfg.rigid_per_image, "fg_fraction": cfg.fg_fraction},
        loss_weights=cfg.loss_weights,
    )
    if [s.name for s in cfg.stages] == list(STAGE_ORDER) and set(cfg.spec.tasks) == set(N.TASKS):
        return cascaded_train(dataset, cfg.spec, cfg.stages, **kw)
    return train_stages(dataset, cfg.spec, cfg.stages, **kw)


def scaled(stage: StageConfig, factor: float) -> StageConfig:
    """Stage with iteration count and step size multiplied by ``factor``."""
    its = max(0, round(stage.iterations * factor))
    return replace(stage, iterations=its, step_size=max(1, min(its, round(stage.step_size * factor))) if its else stage.step_size)
