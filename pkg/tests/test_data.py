import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iodcnn import data as D
from iodcnn.tensor import make_rng


def _write_manifest(tmp_path, entries, size=(40, 30)):
    for e in entries:
        D.write_image(tmp_path / e["image"], np.zeros((size[1], size[0], 3), np.uint8))
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 1, "entries": entries}))
    return tmp_path / "manifest.json"


def test_minimal_manifest(tmp_path):
    p = _write_manifest(tmp_path, [
        {"image": "a.png", "event": "benign", "boxes": {"car": [[1, 1, 10, 10]]}},
        {"image": "b.png", "event": "malicious", "boxes": {"fire": [[0, 0, 40, 30]]}},
    ])
    m = D.load_manifest(p)
    assert len(m) == 2
    assert m.entries[1].gt(D.NONRIGID_CLASSES)[0].class_id == 1
    assert D.load_manifest(tmp_path) == m  # directory form


def test_unknown_category(tmp_path):
    p = _write_manifest(tmp_path, [{"image": "a.png", "event": "benign", "boxes": {"dog": [[1, 1, 5, 5]]}}])
    with pytest.raises(D.ManifestError, match="entry 0: .*unknown category 'dog'"):
        D.load_manifest(p)


def test_box_out_of_bounds(tmp_path):
    p = _write_manifest(tmp_path, [
        {"image": "a.png", "event": "benign"},
        {"image": "b.png", "event": "benign", "boxes": {"car": [[10, 10, 41, 20]]}},
    ])
    with pytest.raises(D.ManifestError, match="entry 1: .*exceeds image bounds"):
        D.load_manifest(p)


def test_bad_event_and_missing_image(tmp_path):
    p = _write_manifest(tmp_path, [{"image": "a.png", "event": "riot"}])
    with pytest.raises(D.ManifestError, match="entry 0: field 'event'"):
        D.load_manifest(p)
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 1, "entries": [{"image": "zz.png", "event": "benign"}]}))
    with pytest.raises(D.ManifestError, match="entry 0: image file"):
        D.load_manifest(tmp_path)


def test_version_field(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"version": 2, "entries": []}))
    with pytest.raises(D.ManifestError, match="'version'"):
        D.load_manifest(tmp_path)


def test_manifest_round_trip(tmp_path):
    m, _ = D.generate_synthetic(D.SyntheticSpec(count=6, seed=3), tmp_path)
    back = D.load_manifest(tmp_path)
    assert back.entries == m.entries
    D.save_manifest(back, tmp_path / "again.json")
    assert json.loads((tmp_path / "again.json").read_text()) == json.loads((tmp_path / "manifest.json").read_text())


box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 20), st.integers(1, 20)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=50)
@given(st.lists(st.tuples(st.sampled_from(D.EVENT_CLASSES),
                          st.dictionaries(st.sampled_from(D.CATEGORIES), st.lists(box, max_size=3))), max_size=5))
def test_manifest_round_trip_property(items):
    m = D.DatasetManifest([D.Entry(f"i{k}.png", ev, bx) for k, (ev, bx) in enumerate(items)])
    doc = json.loads(json.dumps(m.to_json()))
    assert D.parse_manifest(doc, ".", check_images=False).entries == m.entries


def test_synthetic_balance_and_placement():
    m, images = D.generate_synthetic(D.SyntheticSpec(count=20, seed=7))
    assert len(m.indices("benign")) == 10 and len(m.indices("malicious")) == 10
    for e, img in zip(m.entries, images):
        nonrigid = [b for c in D.NONRIGID_CLASSES for b in e.boxes.get(c, [])]
        if e.event == "malicious":
            assert nonrigid
        else:
            assert not nonrigid and e.boxes
        h, w = img.shape[:2]
        assert all(0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h for bs in e.boxes.values() for x1, y1, x2, y2 in bs)


def test_synthetic_deterministic(tmp_path):
    spec = D.SyntheticSpec(count=4, seed=11)
    _, a = D.generate_synthetic(spec, tmp_path / "a")
    _, b = D.generate_synthetic(spec, tmp_path / "b")
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    for name in ("manifest.json", "img_00000.png", "img_00003.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_rejects_small_images():
    with pytest.raises(ValueError, match="minimum"):
        D.generate_synthetic(D.SyntheticSpec(min_size=32, max_size=40))


@pytest.mark.parametrize("cat", D.CATEGORIES)
@pytest.mark.parametrize("seed", range(5))
def test_boxes_bound_rendered_pixels(cat, seed):
    rng = make_rng(seed, 99)
    canvas = np.full((60, 60, 3), -1.0)
    hint = D._place(cat, 60, 60, [], rng)
    got = D._render(canvas, cat, hint, rng)
    ys, xs = np.nonzero((canvas != -1.0).any(axis=2))
    assert got == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_read_image_rejects_non_rgb(tmp_path):
    from PIL import Image

    Image.new("L", (8, 8)).save(tmp_path / "g.png")
    with pytest.raises(ValueError, match="8-bit RGB"):
        D.read_image(tmp_path / "g.png")
    D.write_image(tmp_path / "c.png", np.full((5, 6, 3), 7, np.uint8))
    assert D.read_image(tmp_path / "c.png").shape == (5, 6, 3)


def test_split_keeps_balance():
    train, held = D.split_indices(200, 0.5, 0)
    assert len(train) == 100 and not set(train) & set(held)
    assert sum(i % 2 for i in train) == 50


def test_pad_batch():
    out = D.pad_batch([np.ones((3, 4, 5)), np.ones((3, 6, 2))], np.float32)
    assert out.shape == (2, 3, 6, 5) and out[1, :, :, 2:].sum() == 0


def test_dataset_accessors(tmp_path):
    D.generate_synthetic(D.SyntheticSpec(count=4, seed=1), tmp_path)
    ds = D.Dataset.load(tmp_path)
    assert ds.event_label(1) == 1 and ds.nonrigid_gt(1)
    mean, std = ds.stats()
    assert mean.shape == (3,) and np.all(std > 0)
