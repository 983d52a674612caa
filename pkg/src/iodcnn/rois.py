"""RoI generation, IoU labeling and minibatch RoI sampling."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_SCALES = (0.9, 0.7, 0.5, 0.3, 0.2)
DEFAULT_STRIDE_FRAC = 0.25


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int | None = None
    score: float | None = None

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box needs x2 > x1 and y2 > y1, got {self.coords}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def translated(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy, self.class_id, self.score)


@dataclass(frozen=True)
class LabeledRoi:
    box: Box
    label: int
    max_iou: float


def multiscale_windows(width: int, height: int) -> list[Box]:
    """Whole image plus four corner-anchored windows of 2/3 width and height."""
    if width < 3 or height < 3:
        raise ValueError(f"image must be at least 3x3, got {width}x{height}")
    ww, wh = (2 * width) // 3, (2 * height) // 3
    dx, dy = width - ww, height - wh
    return [
        Box(0, 0, width, height),
        Box(0, 0, ww, wh),
        Box(dx, 0, dx + ww, wh),
        Box(0, dy, ww, dy + wh),
        Box(dx, dy, dx + ww, dy + wh),
    ]


def _offsets(extent: int, win: int, step: int) -> list[int]:
    offs = list(range(0, extent - win + 1, step))
    if offs[-1] != extent - win:
        offs.append(extent - win)
    return offs


def grid_proposals(width, height, scales=DEFAULT_SCALES, stride_frac=DEFAULT_STRIDE_FRAC) -> list[Box]:
    """Dense multi-scale window grid standing in for selective search.

    Each scale ``s`` yields windows of ``floor(s*W) x floor(s*H)`` stepped by
    ``stride_frac`` of the window size; the last row/column is pushed flush
    to the image edge.  Ordering is scale-major, then row-major.
    """
    scales = list(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    if not 0 < stride_frac <= 1:
        raise ValueError(f"stride_frac must be in (0, 1], got {stride_frac}")
    boxes = []
    for s in scales:
        if not 0 < s <= 1:
            raise ValueError(f"scale must be in (0, 1], got {s}")
        ww, wh = max(1, math.floor(s * width)), max(1, math.floor(s * height))
        sx, sy = max(1, math.floor(stride_frac * ww)), max(1, math.floor(stride_frac * wh))
        for y in _offsets(height, wh, sy):
            for x in _offsets(width, ww, sx):
                boxes.append(Box(x, y, x + ww, y + wh))
    return boxes


_ROW = re.compile(r"\s+")


class ProposalParseError(ValueError):
    pass


def load_proposals(path, image_sizes: dict[str, tuple[int, int]] | None = None):
    """Read ``<image_id> <x1> <y1> <x2> <y2>`` rows into ``{image_id: [Box]}``.

    With ``image_sizes`` (id -> (width, height)) boxes are clamped to the
    image; the number of clamped boxes is returned alongside the mapping.
    """
    out: dict[str, list[Box]] = {}
    clamped = 0
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = _ROW.split(line)
        if len(parts) != 5:
            raise ProposalParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            x1, y1, x2, y2 = (float(v) for v in parts[1:])
        except ValueError:
            raise ProposalParseError(f"{path}:{lineno}: non-numeric coordinate") from None
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
            raise ProposalParseError(f"{path}:{lineno}: non-finite coordinate")
        if image_sizes is not None and parts[0] in image_sizes:
            w, h = image_sizes[parts[0]]
            c = (min(max(x1, 0), w), min(max(y1, 0), h), min(max(x2, 0), w), min(max(y2, 0), h))
            if c != (x1, y1, x2, y2):
                clamped += 1
                x1, y1, x2, y2 = c
        if not (x2 > x1 and y2 > y1):
            raise ProposalParseError(f"{path}:{lineno}: box needs x2 > x1 and y2 > y1")
        out.setdefault(parts[0], []).append(Box(x1, y1, x2, y2))
    if clamped:
        log.warning("%s: clamped %d out-of-bounds proposals", path, clamped)
    return out, clamped


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    """Vectorized pairwise IoU, ``[len(a), len(b)]``."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.coords for x in a], dtype=np.float64)
    B = np.array([x.coords for x in b], dtype=np.float64)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def label_rois(rois: Sequence[Box], gt: Sequence[Box], threshold: float) -> list[LabeledRoi]:
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if not gt:
        return [LabeledRoi(r, 0, 0.0) for r in rois]
    ious = iou_matrix(rois, gt)
    best = ious.argmax(axis=1)  # lowest index on ties
    out = []
    for r, j, row in zip(rois, best, ious):
        m = float(row[j])
        out.append(LabeledRoi(r, int(gt[j].class_id) if m >= threshold else 0, m))
    return out


def sample_rois(labeled: Sequence[LabeledRoi], count: int, fg_fraction: float, rng) -> list[LabeledRoi]:
    """Draw exactly ``count`` RoIs with up to ``round(fg_fraction*count)`` foreground.

    Short pools are topped up from the other pool; if both run out the
    remainder is drawn with replacement from everything.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not labeled:
        raise ValueError("labeled RoI list is empty")
    fg = [i for i, r in enumerate(labeled) if r.label > 0]
    bg = [i for i, r in enumerate(labeled) if r.label == 0]
    n_fg = min(round(fg_fraction * count), len(fg))
    n_bg = min(count - n_fg, len(bg))
    n_fg = min(count - n_bg, len(fg))
    pick = []
    if n_fg:
        pick.extend(rng.choice(fg, size=n_fg, replace=False).tolist())
    if n_bg:
        pick.extend(rng.choice(bg, size=n_bg, replace=False).tolist())
    short = count - len(pick)
    if short:
        pick.extend(rng.choice(len(labeled), size=short, replace=True).tolist())
    return [labeled[i] for i in pick]


def boxes_to_array(boxes: Iterable[Box], batch_idx: int) -> np.ndarray:
    """Stack boxes into ``[R, 5]`` rows of (batch_idx, x1, y1, x2, y2)."""
    rows = [(batch_idx, *b.coords) for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    if not order:
        return []
    ious = iou_matrix(boxes, boxes)
    keep, suppressed = [], np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return keep
