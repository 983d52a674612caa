"""Dataset manifests, image I/O and the synthetic crowd-scene generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .network import EVENT_CLASSES, NONRIGID_CLASSES, RIGID_CLASSES, atomic_write
from .rois import Box
from .tensor import make_rng

CATEGORIES = RIGID_CLASSES + NONRIGID_CLASSES
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass
class Entry:
    image: str
    event: str
    boxes: dict[str, list[tuple[int, int, int, int]]] = field(default_factory=dict)

    @property
    def event_label(self) -> int:
        return EVENT_CLASSES.index(self.event)

    def gt(self, categories) -> list[Box]:
        """Ground-truth boxes for ``categories`` with 1-based class ids in that order."""
        out = []
        for cid, name in enumerate(categories, start=1):
            out.extend(Box(*b, class_id=cid) for b in self.boxes.get(name, []))
        return out

    def to_json(self) -> dict:
        return {
            "image": self.image,
            "event": self.event,
            "boxes": {k: [list(b) for b in v] for k, v in sorted(self.boxes.items())},
        }


@dataclass
class DatasetManifest:
    entries: list[Entry]
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def to_json(self) -> dict:
        return {"version": MANIFEST_VERSION, "entries": [e.to_json() for e in self.entries]}

    def image_path(self, i: int) -> Path:
        return self.root / self.entries[i].image

    def indices(self, event: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.event == event]

    def subset(self, idx) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in idx], self.root)


def _fail(msg, index=None):
    where = f"entry {index}: " if index is not None else ""
    raise ManifestError(f"{where}{msg}")


def parse_manifest(doc, root=".", check_images=True) -> DatasetManifest:
    if not isinstance(doc, dict):
        _fail("manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        _fail(f"field 'version' must be {MANIFEST_VERSION}, got {doc.get('version')!r}")
    raw = doc.get("entries")
    if not isinstance(raw, list):
        _fail("field 'entries' must be a list")
    root = Path(root)
    entries = []
    for i, e in enumerate(raw):
        if not isinstance(e, dict):
            _fail("must be an object", i)
        img = e.get("image")
        if not isinstance(img, str) or not img:
            _fail("field 'image' must be a non-empty string", i)
        event = e.get("event")
        if event not in EVENT_CLASSES:
            _fail(f"field 'event' must be one of {EVENT_CLASSES}, got {event!r}", i)
        boxes = e.get("boxes", {})
        if not isinstance(boxes, dict):
            _fail("field 'boxes' must be an object", i)
        size = None
        if check_images:
            path = root / img
            if not path.is_file():
                _fail(f"image file {path} not found", i)
            with Image.open(path) as im:
                size = im.size
        parsed = {}
        for cat, lst in boxes.items():
            if cat not in CATEGORIES:
                _fail(f"field 'boxes': unknown category {cat!r} (allowed: {', '.join(CATEGORIES)})", i)
            if not isinstance(lst, list):
                _fail(f"field 'boxes.{cat}' must be a list", i)
            parsed[cat] = []
            for b in lst:
                if not (isinstance(b, list) and len(b) == 4 and all(isinstance(v, (int, float)) for v in b)):
                    _fail(f"field 'boxes.{cat}': each box must be [x1, y1, x2, y2]", i)
                x1, y1, x2, y2 = b
                if not (x2 > x1 and y2 > y1):
                    _fail(f"field 'boxes.{cat}': box {b} needs x2 > x1 and y2 > y1", i)
                if x1 < 0 or y1 < 0 or (size and (x2 > size[0] or y2 > size[1])):
                    _fail(f"field 'boxes.{cat}': box {b} exceeds image bounds {size}", i)
                parsed[cat].append(tuple(b))
        entries.append(Entry(img, event, parsed))
    return DatasetManifest(entries, root)


def load_manifest(path, check_images=True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(doc, path.parent, check_images)


def save_manifest(m: DatasetManifest, path):
    atomic_write(path, (json.dumps(m.to_json(), indent=1) + "\n").encode())


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG or PPM into uint8 ``[H, W, 3]``."""
    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM") or im.mode != "RGB":
            raise ValueError(f"{path}: expected an 8-bit RGB PNG or PPM, got {im.format} {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def write_image(path, img: np.ndarray):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.asarray(img, dtype=np.uint8), "RGB").save(tmp, format="PNG")
    tmp.replace(path)


# -- synthetic scenes ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 20
    min_size: int = 64
    max_size: int = 80
    noise: float = 0.04
    seed: int = 0
    max_rigid: int = 2
    min_input: int = 48


_COLORS = {
    "police": (0.10, 0.15, 0.55),
    "helmet": (0.95, 0.85, 0.10),
    "car": (0.75, 0.10, 0.10),
    "fire": (1.00, 0.45, 0.05),
    "smoke": (0.55, 0.55, 0.58),
}


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _shape_mask(cat: str, h: int, w: int, rng) -> np.ndarray:
    """Object mask inside an ``h x w`` patch; rows/cols touching every edge."""
    m = np.zeros((h, w), dtype=bool)
    if cat == "police":
        m[:, :] = True
    elif cat == "helmet":
        m = _ellipse(h, w, h - 0.5, (w - 1) / 2, h - 0.5, w / 2)
    elif cat == "car":
        body = max(2, (3 * h) // 4)
        m[:body, :] = True
        r = max(1, h - body)
        for cx in (w // 4, (3 * w) // 4):
            m |= _ellipse(h, w, h - r, cx, r, r)
    else:
        n = int(rng.integers(3, 6))
        for _ in range(n):
            cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
            m |= _ellipse(h, w, cy, cx, rng.uniform(0.25, 0.5) * h, rng.uniform(0.25, 0.5) * w)
    return m


def _render(canvas, cat, box_hint, rng):
    """Draw ``cat`` inside the hint box; return the exact bounding box of its pixels."""
    x1, y1, x2, y2 = box_hint
    h, w = y2 - y1, x2 - x1
    mask = _shape_mask(cat, h, w, rng)
    ys, xs = np.nonzero(mask)
    color = np.array(_COLORS[cat]) + rng.normal(0, 0.03, 3)
    region = canvas[y1:y2, x1:x2]
    if cat == "smoke":
        region[mask] = 0.35 * region[mask] + 0.65 * color
    elif cat == "fire":
        flicker = rng.uniform(0.85, 1.0, size=(h, w, 1)) * color
        flicker[..., 1] += rng.uniform(0, 0.35, size=(h, w))
        region[mask] = flicker[mask]
    else:
        region[mask] = color
        if cat == "police":
            band = max(1, h // 5)
            region[h // 3 : h // 3 + band] = (0.95, 0.95, 0.95)
        if cat == "car":
            wheels = mask.copy()
            wheels[: max(2, (3 * h) // 4)] = False
            region[wheels] = (0.05, 0.05, 0.05)
    return (x1 + int(xs.min()), y1 + int(ys.min()), x1 + int(xs.max()) + 1, y1 + int(ys.max()) + 1)


_SIZES = {
    "police": ((10, 16), (16, 24)),
    "helmet": ((10, 16), (6, 10)),
    "car": ((18, 28), (10, 16)),
    "fire": ((18, 30), (18, 30)),
    "smoke": ((20, 32), (18, 30)),
}


def _place(cat, width, height, taken, rng, tries=50):
    (wl, wh), (hl, hh) = _SIZES[cat]
    for _ in range(tries):
        w = int(rng.integers(wl, wh + 1))
        h = int(rng.integers(hl, hh + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        if all(x + w + 2 <= a or a2 + 2 <= x or y + h + 2 <= b or b2 + 2 <= y for a, b, a2, b2 in taken):
            return (x, y, x + w, y + h)
    return None


def _background(h, w, rng):
    base = rng.uniform(0.25, 0.6, 3)
    grad = np.linspace(0, 1, h)[:, None, None] * rng.uniform(-0.15, 0.15, 3)
    img = np.broadcast_to(base + grad, (h, w, 3)).copy()
    # crowd: small skin/clothing blobs that belong to no category
    for _ in range(int(rng.integers(6, 14))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.5, 3.5)
        img[_ellipse(h, w, cy, cx, r * 1.6, r)] = rng.uniform(0.2, 0.8, 3) * (0.8, 0.7, 0.6)
    return img


def render_scene(width, height, categories, noise, rng):
    """Render the listed categories on a crowd background; returns (uint8 image, boxes)."""
    img = _background(height, width, rng)
    taken, boxes = [], {}
    for cat in categories:
        hint = _place(cat, width, height, taken, rng)
        if hint is None:
            continue
        taken.append(hint)
        boxes.setdefault(cat, []).append(_render(img, cat, hint, rng))
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), boxes


def _scene_categories(malicious: bool, rng, max_rigid: int) -> list[str]:
    cats = []
    if malicious:
        n_nonrigid = int(rng.integers(1, 3))
        cats += [str(c) for c in rng.choice(NONRIGID_CLASSES, size=n_nonrigid)]
        rigid_pool, p = RIGID_CLASSES, (0.35, 0.45, 0.2)
    else:
        rigid_pool, p = RIGID_CLASSES, (0.3, 0.1, 0.6)
    n_rigid = int(rng.integers(0 if malicious else 1, max_rigid + 1))
    cats += [str(c) for c in rng.choice(rigid_pool, size=n_rigid, p=p)]
    return cats


def generate_synthetic(spec: SyntheticSpec, out_dir=None):
    """Balanced benign/malicious scenes.  Returns (manifest, images).

    Event labels alternate benign/malicious.  Malicious scenes always contain
    fire or smoke; benign scenes never do.  With ``out_dir`` the PNGs and
    ``manifest.json`` are written there.
    """
    if spec.min_size < spec.min_input:
        raise ValueError(f"min_size {spec.min_size} is below the network minimum {spec.min_input}")
    if spec.max_size < spec.min_size or spec.count < 2:
        raise ValueError("need max_size >= min_size and count >= 2")
    entries, images = [], []
    for i in range(spec.count):
        rng = make_rng(spec.seed, 1, i)
        malicious = i % 2 == 1
        w = int(rng.integers(spec.min_size, spec.max_size + 1))
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        img, boxes = render_scene(w, h, _scene_categories(malicious, rng, spec.max_rigid), spec.noise, rng)
        entries.append(Entry(f"img_{i:05d}.png", EVENT_CLASSES[int(malicious)], boxes))
        images.append(img)
    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = DatasetManifest(entries, root)
    if out_dir is not None:
        root.mkdir(parents=True, exist_ok=True)
        for e, img in zip(entries, images):
            write_image(root / e.image, img)
        save_manifest(manifest, root / "manifest.json")
    return manifest, images


SCENE_CLASSES = ("empty",) + CATEGORIES


def generate_scenes(count: int, seed: int, min_size=64, max_size=80, noise=0.04):
    """Pretraining set: each scene holds at most one object; label = its category (0 = none)."""
    images, labels = [], []
    for i in range(count):
        rng = make_rng(seed, 2, i)
        label = i % len(SCENE_CLASSES)
        w = int(rng.integers(min_size, max_size + 1))
        h = int(rng.integers(min_size, max_size + 1))
        cats = [SCENE_CLASSES[label]] if label else []
        img, _ = render_scene(w, h, cats, noise, rng)
        images.append(img)
        labels.append(label)
    return images, labels


def channel_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of [0, 1]-scaled pixels over a list of uint8 images."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for img in images:
        x = img.reshape(-1, 3).astype(np.float64) / 255.0
        total += x.sum(axis=0)
        sq += (x * x).sum(axis=0)
        n += x.shape[0]
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


class Dataset:
    """Manifest plus decoded images, ground truth and cached RoI proposals."""

    def __init__(self, manifest: DatasetManifest, images=None, proposals=None):
        self.manifest = manifest
        self._images = list(images) if images is not None else [None] * len(manifest)
        self.proposals = proposals or {}

    def __len__(self):
        return len(self.manifest)

    @classmethod
    def load(cls, path, proposals_path=None):
        from .rois import load_proposals

        m = load_manifest(path)
        ds = cls(m)
        if proposals_path:
            sizes = {}
            for i, e in enumerate(m.entries):
                h, w = ds.image(i).shape[:2]
                sizes[e.image] = (w, h)
            ds.proposals, _ = load_proposals(proposals_path, sizes)
        return ds

    def image(self, i: int) -> np.ndarray:
        if self._images[i] is None:
            self._images[i] = read_image(self.manifest.image_path(i))
        return self._images[i]

    def size(self, i: int) -> tuple[int, int]:
        h, w = self.image(i).shape[:2]
        return w, h

    def event_label(self, i: int) -> int:
        return self.manifest.entries[i].event_label

    def rigid_gt(self, i: int) -> list[Box]:
        return self.manifest.entries[i].gt(RIGID_CLASSES)

    def nonrigid_gt(self, i: int) -> list[Box]:
        return self.manifest.entries[i].gt(NONRIGID_CLASSES)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.manifest.subset(idx), [self._images[i] for i in idx], self.proposals)

    def stats(self):
        return channel_stats(self.image(i) for i in range(len(self)))


def pad_batch(chw_images, dtype) -> np.ndarray:
    """Zero-pad ``[C, H, W]`` images at the bottom/right to a common size."""
    h = max(x.shape[1] for x in chw_images)
    w = max(x.shape[2] for x in chw_images)
    out = np.zeros((len(chw_images), chw_images[0].shape[0], h, w), dtype=dtype)
    for i, x in enumerate(chw_images):
        out[i, :, : x.shape[1], : x.shape[2]] = x
    return out


def split_indices(n: int, frac: float, seed: int):
    """Deterministic train/held-out split keeping event classes balanced (alternating labels)."""
    rng = make_rng(seed, 3)
    perm = rng.permutation(n // 2)
    k = math.floor(frac * (n // 2))
    train = sorted([2 * j for j in perm[:k]] + [2 * j + 1 for j in perm[:k]])
    held = sorted(set(range(n)) - set(train))
    return train, held
