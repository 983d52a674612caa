"""Average precision, detection mAP, and late fusion (score averaging, fc7 concatenation)."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rois import Box, iou_matrix, nms


class MetricError(ValueError):
    pass


def average_precision(scores, positives, n_positives: int | None = None) -> float:
    """Non-interpolated AP: mean precision at each positive's rank.

    Sorting is by descending score, ties kept in input order.  For detection,
    ``n_positives`` counts ground truth that no prediction matched, too.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives, dtype=bool).reshape(-1)
    if scores.shape != positives.shape:
        raise ValueError("scores and positives differ in length")
    total = int(positives.sum()) if n_positives is None else int(n_positives)
    if total <= 0:
        raise MetricError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float((tp[hits] / ranks[hits]).sum() / total)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    class_id: int
    score: float


def match_detections(dets, gt, iou_thresh):
    """Greedy matching for one class.  Returns (scores, is_tp, n_gt) with dets in input order.

    ``gt`` maps image_id -> boxes of this class.  In descending score order a
    detection claims the unmatched gt box of highest IoU, provided that IoU
    reaches ``iou_thresh``.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros(len(dets), dtype=bool)
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    for i in np.argsort(-scores, kind="stable"):
        d = dets[i]
        boxes = gt.get(d.image_id, [])
        if not boxes:
            continue
        ious = iou_matrix([d.box], boxes)[0]
        ious[taken[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            taken[d.image_id][j] = True
            tp[i] = True
    return scores, tp, sum(len(v) for v in gt.values())


def detection_map(dets, gt, iou_thresh: float = 0.5):
    """Per-class AP and their mean.

    ``gt`` maps image_id -> {class_id: [Box]}.  Classes without any ground
    truth box are left out of the mean.
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    classes = sorted({c for per in gt.values() for c, boxes in per.items() if boxes})
    per_class = {}
    for c in classes:
        cdets = [d for d in dets if d.class_id == c]
        cgt = {img: per.get(c, []) for img, per in gt.items()}
        scores, tp, n_gt = match_detections(cdets, cgt, iou_thresh)
        per_class[c] = average_precision(scores, tp, n_gt) if len(cdets) else 0.0
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


# -- late fusion ------------------------------------------------------------------

def score_fusion(score_vectors, weights=None) -> np.ndarray:
    """Weighted arithmetic mean of per-model score vectors (last axis = classes)."""
    vecs = [np.asarray(v, dtype=np.float64) for v in score_vectors]
    if not vecs:
        raise ValueError("no score vectors")
    if weights is None:
        weights = [1.0 / len(vecs)] * len(vecs)
    if len(weights) != len(vecs):
        raise ValueError(f"{len(vecs)} score vectors but {len(weights)} weights")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("score vectors differ in shape")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {sum(weights)}")
    if min(weights) < 0:
        raise ValueError(f"weights must be non-negative, got {list(weights)}")
    if len(vecs) == 1:
        return vecs[0].copy()
    out = np.zeros_like(vecs[0])
    for w, v in zip(weights, vecs):
        out += w * v
    return out


def weight_grid(n_models: int, step: float = 0.1):
    """All weight vectors on the simplex with the given step."""
    k = round(1 / step)
    for combo in itertools.product(range(k + 1), repeat=n_models - 1):
        if sum(combo) <= k:
            yield [c / k for c in combo] + [(k - sum(combo)) / k]


def search_fusion_weights(model_scores, labels, step: float = 0.1):
    """Grid-search fusion weights maximizing AP on a validation split.

    ``model_scores``: one ``[n_images, 2]`` array per model; ``labels``: 1 = malicious.
    Returns (best_weights, best_ap); the first best in grid order wins ties.
    """
    best, best_ap = None, -1.0
    for w in weight_grid(len(model_scores), step):
        fused = score_fusion(model_scores, w)
        ap = average_precision(fused[:, 1], labels)
        if ap > best_ap + 1e-12:
            best, best_ap = w, ap
    return best, best_ap


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: float = 0.0
    loss_history: list[float] = field(default_factory=list)

    def score(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias


def hinge_loss(clf: LinearClassifier, x, y_pm) -> float:
    return float(np.maximum(0.0, 1.0 - y_pm * clf.score(x)).mean())


def feature_fusion_train(features, labels, hinge_c: float = 1.0, rng=None, epochs: int = 1000,
                         lr: float = 0.01, batch_size: int = 32) -> LinearClassifier:
    """Linear classifier on concatenated features by minibatch subgradient descent.

    Minimizes ``0.5*|w|^2 + hinge_c * mean(max(0, 1 - y*(w.x + b)))`` from a
    zero start; the bias is not regularized.  ``labels`` are 0/1.  The
    iterate with the lowest objective is returned.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be [n, d] with one label per row")
    if len(np.unique(y)) < 2:
        raise MetricError("feature fusion needs both classes in the training labels")
    y_pm = np.where(y > 0, 1.0, -1.0)
    n, d = x.shape
    w, b = np.zeros(d), 0.0
    best = (np.inf, w.copy(), b)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        step = lr / np.sqrt(1.0 + epoch)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            active = y_pm[idx] * (x[idx] @ w + b) < 1.0
            gw = w - hinge_c * (y_pm[idx, None] * x[idx])[active].sum(axis=0) / len(idx)
            gb = -hinge_c * y_pm[idx][active].sum() / len(idx)
            w = w - step * gw
            b = b - step * gb
        margins = np.maximum(0.0, 1.0 - y_pm * (x @ w + b))
        history.append(float(margins.mean()))
        obj = 0.5 * float(w @ w) + hinge_c * history[-1]
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return LinearClassifier(best[1], float(best[2]), history)


def feature_fusion_score(clf: LinearClassifier, feature) -> float:
    return float(clf.score(np.asarray(feature, dtype=np.float64).reshape(1, -1))[0])


# -- score files and reports ----------------------------------------------------------

def write_scores(path, rows):
    """``rows``: iterable of (image_id, score_benign, score_malicious)."""
    from .network import atomic_write

    lines = ["image_id,score_benign,score_malicious"]
    lines += [f"{i},{float(b)!r},{float(m)!r}" for i, b, m in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_scores(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        need = {"image_id", "score_benign", "score_malicious"}
        if not rd.fieldnames or not need <= set(rd.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for lineno, row in enumerate(rd, start=2):
            try:
                out[row["image_id"]] = np.array([float(row["score_benign"]), float(row["score_malicious"])])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: bad score row") from None
    return out


def write_report(path, report: dict):
    from .network import atomic_write

    atomic_write(path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())


# -- whole-network evaluation ---------------------------------------------------------

def event_scores(net, dataset) -> np.ndarray:
    """``[n, 2]`` softmax scores of the event head, whole image as the RoI."""
    return np.stack([net.forward_infer(net.preprocess(dataset.image(i))) for i in range(len(dataset))])


def detect(net, image_chw, task: str, proposals, nms_thresh=0.3, max_per_class=50):
    """Class-wise detections (box, class_id, score) from one head, with per-class NMS."""
    coords = np.array([b.coords for b in proposals], dtype=np.float64)
    probs = net.classify_rois(image_chw, coords, task)
    out = []
    for c in range(1, probs.shape[1]):
        s = probs[:, c]
        keep = nms(proposals, s, nms_thresh)[:max_per_class]
        out.extend((proposals[k], c, float(s[k])) for k in keep)
    return out


def evaluate_network(net, dataset, rigid_iou=0.5, nonrigid_iou=0.2) -> dict:
    """Report with ``ap_event``, ``map_rigid``, ``ap_nonrigid`` and ``map_nonrigid``.

    ``ap_nonrigid`` is RoI-classification AP over the five multi-scale windows
    (window labels at ``nonrigid_iou``); ``map_nonrigid`` treats the same
    windows as detections.
    """
    from .network import NONRIGID_CLASSES, RIGID_CLASSES
    from .rois import grid_proposals, label_rois, multiscale_windows

    report: dict = {"n_images": len(dataset)}
    tasks = net.spec.tasks
    if "event" in tasks:
        scores = event_scores(net, dataset)
        labels = [dataset.event_label(i) for i in range(len(dataset))]
        report["ap_event"] = average_precision(scores[:, 1], labels) if any(labels) else None
    if "rigid" in tasks:
        dets, gt = [], {}
        for i in range(len(dataset)):
            img_id = dataset.manifest.entries[i].image
            gt[img_id] = _by_class(dataset.rigid_gt(i))
            w, h = dataset.size(i)
            x = net.preprocess(dataset.image(i))
            dets += [Detection(img_id, b, c, s) for b, c, s in detect(net, x, "rigid", grid_proposals(w, h))]
        per, mean = detection_map(dets, gt, rigid_iou)
        report["map_rigid"] = mean if per else None
        report["ap_rigid_per_class"] = {RIGID_CLASSES[c - 1]: v for c, v in per.items()}
    if "nonrigid" in tasks:
        win_scores, win_labels, dets, gt = [], [], [], {}
        for i in range(len(dataset)):
            img_id = dataset.manifest.entries[i].image
            w, h = dataset.size(i)
            windows = multiscale_windows(w, h)
            nr_gt = dataset.nonrigid_gt(i)
            probs = net.classify_rois(net.preprocess(dataset.image(i)), [b.coords for b in windows], "nonrigid")
            win_scores.append(probs)
            win_labels += [r.label for r in label_rois(windows, nr_gt, nonrigid_iou)]
            gt[img_id] = _by_class(nr_gt)
            dets += [Detection(img_id, b, c, float(probs[k, c])) for k, b in enumerate(windows) for c in range(1, probs.shape[1])]
        probs = np.concatenate(win_scores)
        win_labels = np.array(win_labels)
        per_cls = {}
        for c in range(1, probs.shape[1]):
            if (win_labels == c).any():
                per_cls[NONRIGID_CLASSES[c - 1]] = average_precision(probs[:, c], win_labels == c)
        report["ap_nonrigid"] = float(np.mean(list(per_cls.values()))) if per_cls else None
        report["ap_nonrigid_per_class"] = per_cls
        per, mean = detection_map(dets, gt, nonrigid_iou)
        report["map_nonrigid"] = mean if per else None
        report["nonrigid_metric"] = "ap_nonrigid: RoI-classification AP over multi-scale windows"
    return report


def _by_class(boxes):
    out: dict[int, list[Box]] = {}
    for b in boxes:
        out.setdefault(b.class_id, []).append(b)
    return out


def fc7_matrix(nets, dataset) -> np.ndarray:
    """Concatenated event-head fc7 activations, one row per image."""
    rows = []
    for i in range(len(dataset)):
        img = dataset.image(i)
        rows.append(np.concatenate([n.fc7_features(n.preprocess(img)) for n in nets]))
    return np.stack(rows)


def save_scores_for(net, dataset, path):
    s = event_scores(net, dataset)
    write_scores(path, [(dataset.manifest.entries[i].image, s[i, 0], s[i, 1]) for i in range(len(dataset))])
    return s


def read_score_matrix(paths, image_ids) -> list[np.ndarray]:
    mats = []
    for p in paths:
        d = read_scores(p)
        missing = [i for i in image_ids if i not in d]
        if missing:
            raise ValueError(f"{Path(p)}: no scores for {missing[:3]}")
        mats.append(np.stack([d[i] for i in image_ids]))
    return mats
