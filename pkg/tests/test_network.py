import struct
import zlib

import numpy as np
import pytest

from iodcnn import layers as L
from iodcnn import network as N
from iodcnn.gradcheck import network_problem, tiny_spec
from iodcnn.tensor import make_rng


def _net(heads=N.TASKS, seed=0, dtype=np.float64, **kw):
    return N.build(N.make_spec(heads=heads, fc6_dim=16, fc7_dim=8, pooled=3, **kw), make_rng(seed), dtype)


def _batch(rng, h=56, w=60):
    x = rng.normal(size=(2, 3, h, w))
    rois = {
        "event": np.array([[0, 0, 0, w, h], [1, 0, 0, w, h]], dtype=np.float64),
        "rigid": np.array([[b, *c] for b in (0, 1) for c in ((0, 0, 20, 20), (10, 5, 50, 40))] * 32, dtype=np.float64),
        "nonrigid": np.array([[b, *c] for b in (0, 1) for c in ((0, 0, w, h), (0, 0, 40, 37), (20, 0, 60, 37),
                                                                   (0, 19, 40, 56), (20, 19, 60, 56))], dtype=np.float64),
    }
    labels = {"event": np.array([0, 1]), "rigid": rng.integers(0, 4, 128), "nonrigid": rng.integers(0, 3, 10)}
    return x, rois, labels


def test_parameter_paths_share_fc6():
    net = _net()
    paths = set(net.params)
    assert sum(p.startswith("shared/fc6/") for p in paths) == 2
    for t in N.TASKS:
        assert {f"head-{t}/fc7/weights", f"head-{t}/fc7/bias", f"head-{t}/fc8/weights", f"head-{t}/fc8/bias"} <= paths
    assert len([p for p in paths if "/fc8/" in p]) == 6


def test_init_statistics():
    net = N.build(N.make_spec(fc6_dim=256, fc7_dim=256), make_rng(1))
    fc8 = np.concatenate([net.params[f"head-{t}/fc8/weights"].ravel() for t in N.TASKS])
    fc7 = net.params["head-event/fc7/weights"].ravel()
    assert abs(fc8.std() - 0.1) < 0.01 and abs(fc7.std() - 0.01) < 0.001
    assert all(not np.any(v) for k, v in net.params.items() if k.endswith("/bias"))


def test_build_deterministic():
    assert N.checkpoint_bytes(_net(seed=3)) == N.checkpoint_bytes(_net(seed=3))


def test_logit_shapes():
    net = _net()
    x, rois, _ = _batch(make_rng(0))
    out = net.forward_train(x, rois)
    assert out["event"].shape == (2, 2) and out["rigid"].shape == (128, 4) and out["nonrigid"].shape == (10, 3)
    again = net.forward_train(x, rois)
    assert all(np.array_equal(out[t], again[t]) for t in out)


def test_missing_head_and_empty_rois():
    net = _net(heads=("event",))
    x, rois, _ = _batch(make_rng(0))
    with pytest.raises(ValueError, match="no 'rigid' head"):
        net.forward_train(x, rois)
    with pytest.raises(ValueError):
        net.forward_train(x, {"event": np.zeros((0, 5))})


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        _net().backward_train({"event": np.zeros((2, 2))})


def test_sharing_contract():
    net = _net()
    x, rois, _ = _batch(make_rng(1))
    base = net.forward_train(x, rois)
    saved = net.params["shared/fc6/weights"].copy()
    net.params["shared/fc6/weights"] += 0.05
    moved = net.forward_train(x, rois)
    assert all(not np.array_equal(base[t], moved[t]) for t in N.TASKS)
    net.params["shared/fc6/weights"] = saved
    net.params["head-event/fc7/weights"] += 0.05
    moved = net.forward_train(x, rois)
    assert not np.array_equal(base["event"], moved["event"])
    assert np.array_equal(base["rigid"], moved["rigid"]) and np.array_equal(base["nonrigid"], moved["nonrigid"])


def test_gradient_additivity():
    net, x, rois, labels = network_problem(4)
    _, _, full = net.loss_and_grads(x, rois, labels)
    parts = [net.loss_and_grads(x, {t: rois[t]}, {t: labels[t]})[2] for t in N.TASKS]
    for k in ("backbone/conv1/weights", "backbone/conv2/bias", "shared/fc6/weights"):
        summed = sum(p[k] for p in parts)
        assert np.allclose(full[k], summed, rtol=1e-6, atol=1e-12)
    for t, p in zip(N.TASKS, parts):
        assert np.array_equal(full[f"head-{t}/fc7/weights"], p[f"head-{t}/fc7/weights"])


def test_zero_weight_isolates_one_task():
    net, x, rois, labels = network_problem(5)
    _, _, only = net.loss_and_grads(x, {"rigid": rois["rigid"]}, {"rigid": labels["rigid"]})
    _, _, masked = net.loss_and_grads(x, rois, labels, {"event": 0.0, "nonrigid": 0.0})
    for k in only:
        assert np.allclose(masked[k], only[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(2))
def test_network_gradcheck(seed):
    from iodcnn.gradcheck import check_network

    assert check_network(seed).passed


def test_forward_infer_valid_scores():
    net = _net(dtype=np.float32)
    p = net.forward_infer(make_rng(0).normal(size=(3, 50, 70)))
    assert p.shape == (2,) and p.sum() == pytest.approx(1.0, abs=1e-12) and np.all((p > 0) & (p < 1))


def test_variable_input_size():
    net = _net(dtype=np.float32)
    rng = make_rng(2)
    for h, w in [(48, 48), (61, 97), (130, 75)]:
        p = net.forward_infer(rng.normal(size=(3, h, w)))
        assert np.all(np.isfinite(p))
        feat, _ = net.backbone_forward(np.zeros((1, 3, h, w), np.float32))
        fh, fw = feat.shape[2:]
        cells = L.map_rois([[0, 0, 0, w, h]], net.spec.roi_pool.spatial_scale, fh, fw)[0]
        assert cells.tolist() == [0, 0, 0, fw, fh]


def test_below_minimum_size_names_minimum():
    net = _net(dtype=np.float32)
    m = net.spec.min_input_size
    assert m == 8 * 3
    with pytest.raises(ValueError, match=f"minimum size {m}x{m}"):
        net.forward_infer(np.zeros((3, m - 1, 64)))


def test_inference_ignores_detection_heads():
    full = _net(dtype=np.float32)
    event_only = N.Network(N.make_spec(heads=("event",), fc6_dim=16, fc7_dim=8, pooled=3),
                           {k: v for k, v in full.params.items() if not k.startswith(("head-rigid", "head-nonrigid"))})
    img = make_rng(3).normal(size=(3, 52, 52))
    assert np.array_equal(full.forward_infer(img), event_only.forward_infer(img))


def test_inference_prunes_streams():
    net = _net(dtype=np.float32)
    x, rois, _ = _batch(make_rng(0))
    net.op_count = 0
    net.forward_infer(x[0])
    infer_ops = net.op_count
    net.op_count = 0
    net.forward_train(x[:1], {t: r[r[:, 0] == 0] for t, r in rois.items()})
    assert infer_ops < net.op_count


# -- checkpoints ---------------------------------------------------------------------

def test_round_trip_bytes(tmp_path):
    net = _net(dtype=np.float32)
    net.pixel_mean = np.array([0.1, 0.2, 0.3], np.float32)
    N.save(net, tmp_path / "a")
    back = N.load(tmp_path / "a")
    assert back.spec == net.spec
    assert all(back.params[k].tobytes() == v.tobytes() for k, v in net.params.items())
    N.save(back, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_header_layout():
    blob = N.checkpoint_bytes(_net(dtype=np.float32))
    assert blob[:4] == b"IODC"
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_corrupted_and_truncated(tmp_path):
    blob = N.checkpoint_bytes(_net(dtype=np.float32))
    for bad in (blob[:-10], blob[:100], blob[:-50] + bytes(50), b"NOPE" + blob[4:]):
        (tmp_path / "x").write_bytes(bad)
        with pytest.raises(N.CheckpointError):
            N.load(tmp_path / "x")


def test_version_mismatch():
    blob = bytearray(N.checkpoint_bytes(_net(dtype=np.float32))[:-4])
    blob[4:8] = struct.pack("<I", 2)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with pytest.raises(N.CheckpointError, match="version 2"):
        N.parse_checkpoint(bytes(blob))


def test_warm_start_from_single_task(tmp_path):
    src = _net(heads=("event",), dtype=np.float32, seed=1)
    N.save(src, tmp_path / "e")
    iod_spec = N.make_spec(fc6_dim=16, fc7_dim=8, pooled=3)
    net = N.load(tmp_path / "e", iod_spec, make_rng(2))
    assert set(net.params) == set(_net(dtype=np.float32).params)
    for k, v in src.params.items():
        if k.startswith(("backbone/", "shared/")):
            assert np.array_equal(net.params[k], v)
        elif k.endswith("/weights"):
            assert not np.array_equal(net.params[k], v)
    with pytest.raises(ValueError):
        N.load(tmp_path / "e", iod_spec)


def test_atomic_write_leaves_no_temp(tmp_path):
    N.atomic_write(tmp_path / "f", b"abc")
    assert [p.name for p in tmp_path.iterdir()] == ["f"]


def test_spec_validation():
    with pytest.raises(ValueError):
        N.HeadSpec("event", 8, 1)
    with pytest.raises(ValueError):
        N.make_spec(heads=())
    assert N.NetworkSpec.from_dict(tiny_spec().to_dict()) == tiny_spec()
