import itertools

import numpy as np
import pytest

from sparsemask import metrics as M
from sparsemask.tasks import (
    SyntheticTaskSpec,
    augment,
    edge_labels,
    generate,
    generate_split,
    load_split,
    read_cache,
    sample_shapes,
    write_cache,
)


def small(kind="multi_class_shapes", **kw):
    kw.setdefault("num_classes", 4 if kind == "multi_class_shapes" else 2)
    return SyntheticTaskSpec(kind=kind, image_size=32, num_train=6, num_val=3, **kw)


@pytest.mark.parametrize("kind", ["multi_class_shapes", "binary_saliency", "edge_map"])
def test_generation_is_deterministic(kind):
    spec = small(kind)
    a, b = generate(spec, 2), generate(spec, 2)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    other = generate(spec, 3)
    assert other[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("kind", ["multi_class_shapes", "binary_saliency", "edge_map"])
def test_label_range_and_dtype(kind):
    spec = small(kind)
    x, y = generate_split(spec, "train")
    assert x.dtype == np.float32 and y.dtype == np.uint8
    assert x.shape == (6, 3, 32, 32) and y.shape == (6, 32, 32)
    assert x.min() >= 0 and x.max() <= 1
    assert y.max() < spec.num_classes


def test_splits_differ():
    spec = small()
    assert generate(spec, 0, "train")[0].tobytes() != generate(spec, 0, "val")[0].tobytes()
    with pytest.raises(IndexError):
        generate(spec, 3, "val")
    with pytest.raises(ValueError):
        generate(spec, 0, "test")


@pytest.mark.parametrize("priors", [None, (0.5, 0.3, 0.2)])
def test_class_frequency_matches_priors(priors):
    spec = SyntheticTaskSpec(class_priors=priors)
    counts = np.zeros(3)
    for i in range(500):
        for s in sample_shapes(spec, np.random.default_rng([spec.seed, 0, i, 0])):
            counts[s.cls - 1] += 1
    freq = counts / counts.sum()
    np.testing.assert_allclose(freq, spec.priors(), rtol=0.2)


def _hue_spread(spec):
    by_class = {}
    for i in range(40):
        for s in sample_shapes(spec, np.random.default_rng([i])):
            by_class.setdefault(s.cls, []).append(s.color)
    return max(np.std(np.array(c), axis=0).max() for c in by_class.values())


def test_class_color_toggle():
    assert _hue_spread(small()) < 0.15
    assert _hue_spread(small(class_color=False)) > 0.2


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(kind="binary_saliency", num_classes=3)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(kind="depth")
    with pytest.raises(ValueError):
        SyntheticTaskSpec(class_priors=(1.0,))
    spec = SyntheticTaskSpec(class_priors=(1, 2, 3), shape_scale_range=(0.2, 0.4))
    assert SyntheticTaskSpec.from_dict(spec.to_dict()) == spec


def test_edge_labels():
    region = np.zeros((4, 4), dtype=np.uint8)
    region[1:3, 1:3] = 1
    e = edge_labels(region)
    assert e[0, 0] == 0 and e[1, 1] == 1 and e[0, 1] == 1
    assert edge_labels(np.zeros((3, 3))).sum() == 0


def test_augment_flip_and_scale():
    spec = small()
    x, y = generate(spec, 0)
    rng = np.random.default_rng(0)
    flips = [augment(x, y, np.random.default_rng(s))[1] for s in range(8)]
    assert any(np.array_equal(f, y[:, ::-1]) for f in flips)
    assert any(np.array_equal(f, y) for f in flips)
    ax, ay = augment(x, y, rng, flip=False, scale_range=(0.5, 0.5))
    assert ax.shape == x.shape
    assert (ay == 255).any()
    bx, by = augment(x, y, rng, flip=False, scale_range=(2.0, 2.0))
    assert not (by == 255).any()


def test_cache_round_trip(tmp_path):
    spec = small()
    x, y = generate_split(spec, "train")
    path = tmp_path / "c.bin"
    write_cache(path, x, y)
    rx, ry = read_cache(path)
    np.testing.assert_array_equal(rx, x)
    np.testing.assert_array_equal(ry, y)
    assert path.read_bytes()[:4] == b"SMDS"
    assert path.stat().st_size == 16 + x.size * 4 + y.size


def test_cache_rejects_corruption(tmp_path):
    spec = small()
    x, y = generate_split(spec, "val")
    path = tmp_path / "c.bin"
    write_cache(path, x, y)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="truncated"):
        read_cache(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="not a dataset"):
        read_cache(path)


def test_load_split_uses_cache(tmp_path):
    spec = small()
    a = load_split(spec, "val", tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = load_split(spec, "val", tmp_path)
    np.testing.assert_array_equal(a[0], b[0])


# -- metrics ---------------------------------------------------------------
def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, size=(3, 8, 8))
    assert M.miou(gt, gt, 4) == 1.0 and M.pixel_acc(gt, gt) == 1.0


def test_complement_binary():
    gt = np.array([[0, 1], [1, 0]])
    assert M.miou(1 - gt, gt, 2) == 0.0


def test_hand_confusion_matrix():
    gt = np.array([[1, 1], [1, 0]])
    pred = np.array([[1, 1], [0, 0]])
    cm = M.confusion_matrix(pred, gt, 2)
    assert cm.tolist() == [[1, 0], [1, 2]]
    assert M.miou(pred, gt, 2) == pytest.approx(0.5 * (2 / 3 + 1 / 2))
    assert M.miou(pred, gt, 2) == pytest.approx(0.5833, abs=1e-4)
    assert M.pixel_acc(pred, gt) == 0.75


def test_ignore_pixels_excluded():
    gt = np.array([[1, 255], [0, 255]])
    pred = np.array([[1, 0], [0, 1]])
    assert M.miou(pred, gt, 2) == 1.0
    assert M.pixel_acc(pred, gt) == 1.0


def test_metrics_permutation_invariant(rng):
    gt = rng.integers(0, 3, size=64)
    pred = rng.integers(0, 3, size=64)
    p = rng.permutation(64)
    assert M.miou(pred, gt, 3) == pytest.approx(M.miou(pred[p], gt[p], 3))
    prob = rng.random(64)
    b = gt > 0
    assert M.f_beta(prob, b) == pytest.approx(M.f_beta(prob[p], b[p]))


def test_mae_examples():
    gt = np.array([[1, 1], [0, 0]])
    assert M.mae(np.full((2, 2), 0.5), gt) == 0.5
    assert M.mae(gt.astype(float), gt) == 0.0
    assert M.f_beta(gt.astype(float), gt) == 1.0


def f_beta_sweep(prob, gt, beta2=0.3):
    best = 0.0
    for k in range(1, 256):
        t = k / 255
        pos = prob >= t
        tp = np.sum(pos & gt)
        p = tp / pos.sum() if pos.sum() else 0.0
        r = tp / gt.sum() if gt.sum() else 0.0
        if beta2 * p + r > 0:
            best = max(best, (1 + beta2) * p * r / (beta2 * p + r))
    return best


def test_f_beta_matches_sweep(rng):
    for _ in range(30):
        prob = rng.random((4, 4))
        prob[rng.random((4, 4)) < 0.2] = rng.choice([0.0, 1.0, 128 / 255])
        gt = rng.random((4, 4)) < 0.4
        assert M.f_beta(prob, gt) == pytest.approx(f_beta_sweep(prob, gt), abs=1e-6)


def test_metrics_in_unit_interval(rng):
    for _ in range(20):
        gt, pred = rng.integers(0, 3, (2, 5, 5))
        prob = rng.random((5, 5))
        for v in (M.miou(pred, gt, 3), M.pixel_acc(pred, gt), M.mae(prob, gt > 0), M.f_beta(prob, gt > 0)):
            assert 0.0 <= v <= 1.0


def test_metrics_log_round_trip(tmp_path):
    log = M.MetricsLog("abc123")
    for e, v in itertools.product(range(2), [0.1, 1 / 3]):
        log.add(e, "val", "miou", v)
    log.add(1, "train", "loss", 0.25)
    path = tmp_path / "metrics.csv"
    log.write(path)
    assert path.read_text().splitlines()[0] == "# config_digest=abc123"
    back = M.MetricsLog.read(path)
    assert back.rows == log.rows
    assert back.last("val", "miou") == pytest.approx(1 / 3)
    assert back.series("train", "loss") == [0.25]
