import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from todsynth import numerics as nx
from todsynth.numerics import IGNORE_INDEX
from todsynth.scenes import SceneConfig, generate_dataset
from todsynth.segment import (
    SegNet,
    SegNetConfig,
    augment_batch,
    calibrate_pixel_filter,
    compute_metrics,
    evaluate,
    pixel_filter,
    seg_loss,
    train_seg,
)


def brute_force_metrics(pred, gt, K):
    """Per-pixel counting oracle, written independently of the confusion matrix."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    pairs = [(g, p) for g, p in zip(gt, pred) if g != IGNORE_INDEX]
    correct = sum(g == p for g, p in pairs)
    ious, accs = [], []
    for c in range(K):
        tp = sum(g == c and p == c for g, p in pairs)
        fp = sum(g != c and p == c for g, p in pairs)
        fn = sum(g == c and p != c for g, p in pairs)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
        if tp + fn:
            accs.append(tp / (tp + fn))
    return correct / len(pairs), sum(ious) / len(ious), sum(accs) / len(accs)


def test_perfect_prediction():
    gt = np.random.default_rng(0).integers(0, 4, size=(3, 8, 8))
    m = compute_metrics(gt, gt, 4)
    assert (m.oa, m.miou, m.macc) == (1.0, 1.0, 1.0)


def test_two_by_two_hand_case():
    m = compute_metrics(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]]), 2)
    assert m.oa == 0.75
    np.testing.assert_allclose(m.iou, [0.5, 2 / 3])
    assert m.miou == pytest.approx(0.5833, abs=1e-4)
    assert m.macc == 0.75
    assert set(m.to_dict()) == {"OA", "mIoU", "mAcc", "per_class_IoU"}


def test_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(200):
        K = int(rng.integers(2, 7))
        gt = rng.integers(0, K, size=(8, 8))
        pred = np.where(rng.random((8, 8)) < 0.6, gt, rng.integers(0, K, size=(8, 8)))
        gt = np.where(rng.random((8, 8)) < 0.05, IGNORE_INDEX, gt)
        m = compute_metrics(pred, gt, K)
        oa, miou, macc = brute_force_metrics(pred, gt, K)
        assert (m.oa, m.miou, m.macc) == pytest.approx((oa, miou, macc), abs=1e-12)
        assert m.confusion.sum() == np.sum(gt != IGNORE_INDEX)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_metrics_permutation_equivariant(K, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, K, size=(2, 8, 8))
    pred = np.where(rng.random(gt.shape) < 0.5, gt, rng.integers(0, K, size=gt.shape))
    perm = rng.permutation(K)
    a, b = compute_metrics(pred, gt, K), compute_metrics(perm[pred], perm[gt], K)
    assert (a.oa, a.miou, a.macc) == pytest.approx((b.oa, b.miou, b.macc), abs=1e-12)
    for v in (a.oa, a.miou, a.macc):
        assert 0.0 <= v <= 1.0


def test_absent_classes_excluded():
    m = compute_metrics(np.array([0, 0, 1]), np.array([0, 0, 0]), 5)
    assert m.miou == pytest.approx((2 / 3 + 0.0) / 2)
    assert m.macc == pytest.approx(2 / 3)
    assert np.isnan(m.iou[3]) and m.to_dict()["per_class_IoU"][3] is None


def test_derangement_falls_below_majority():
    gt = np.array([0] * 50 + [1] * 30 + [2] * 20)
    derange = np.array([1, 2, 0])
    m = compute_metrics(derange[gt], gt, 3)
    assert m.oa < 0.5


def test_metric_errors():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 2)), np.full((2, 2), IGNORE_INDEX), 3)
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 2)), np.zeros((3, 2)), 3)


def test_segnet_shapes_and_input_gradient():
    net = SegNet(SegNetConfig(num_classes=4, width=4), seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = nx.Tensor(rng.normal(size=(3, 8, 8)), dtype=np.float64, requires_grad=True)
    assert net(x).shape == (4, 8, 8)
    assert net(rng.normal(size=(2, 3, 8, 8))).shape == (2, 4, 8, 8)
    mask = rng.integers(0, 4, size=(1, 8, 8))
    before = {k: p.data.copy() for k, p in net.params.items()}
    build = lambda: seg_loss(net, nx.reshape(x, (1, 3, 8, 8)), mask)  # noqa: E731
    (g,) = nx.grad_of(build(), [x])
    fd = nx.finite_difference(lambda: build().data, x.data, h=1e-5)
    assert nx.rel_error(g, fd) < 1e-3
    assert all(np.array_equal(before[k], p.data) for k, p in net.params.items())
    with pytest.raises(nx.ShapeError):
        net(np.zeros((1, 2, 8, 8)))


def test_segnet_checkpoint_roundtrip(tmp_path):
    net = SegNet(SegNetConfig(num_classes=5, width=4), seed=9)
    net.save(tmp_path / "s.todw")
    back = SegNet.load(tmp_path / "s.todw")
    x = np.random.default_rng(0).normal(size=(1, 3, 8, 8)).astype(np.float32)
    assert back(x).data.tobytes() == net(x).data.tobytes()


def test_augment_preserves_pairing():
    rng = np.random.default_rng(3)
    masks = rng.integers(0, 6, size=(8, 8, 8)).astype(np.uint8)
    images = np.repeat(masks[:, None].astype(np.float32), 3, axis=1)
    ai, am = augment_batch(images, masks, rng)
    assert ai.shape == images.shape and am.shape == masks.shape
    np.testing.assert_array_equal(ai[:, 0], am)


CFG = SceneConfig(size=16, regions=(2, 4), seed=11)


@pytest.fixture(scope="module")
def scenes():
    data = generate_dataset(CFG, 256)
    val = generate_dataset(CFG, 64, base_seed=50_000)
    return data, val


@pytest.fixture(scope="module")
def trained(scenes):
    data, val = scenes
    return train_seg(data, steps=300, width=8, seed=0)


def test_train_reaches_high_miou(scenes, trained):
    data, _ = scenes
    assert evaluate(trained, data).miou > 0.7


def test_training_is_deterministic(scenes):
    data, val = scenes
    a = evaluate(train_seg(data[:32], steps=20, width=4, seed=5), val)
    b = evaluate(train_seg(data[:32], steps=20, width=4, seed=5), val)
    assert a.to_json() == b.to_json()


def test_more_data_scores_higher(scenes):
    data, val = scenes
    diffs = []
    for seed in range(3):
        small = evaluate(train_seg(data[:64], steps=300, width=8, seed=seed), val).miou
        large = evaluate(train_seg(data, steps=300, width=8, seed=seed), val).miou
        diffs.append(large - small)
    assert np.median(diffs) > 0


def test_pixel_filter_limits(scenes, trained):
    _, val = scenes
    cal = calibrate_pixel_filter(trained, val)
    s = val[0]
    out, frac = pixel_filter(s.image, s.mask, trained, phi=1e12, calibration=cal)
    assert np.array_equal(out, s.mask) and frac == 0.0
    out, frac = pixel_filter(s.image, s.mask, trained, phi=1e-12, calibration=cal)
    assert np.all(out == IGNORE_INDEX) and frac == 1.0
    with pytest.raises(ValueError, match="calibration"):
        pixel_filter(s.image, s.mask, trained)


def test_pixel_filter_targets_contradicting_half(scenes, trained):
    _, val = scenes
    cal = calibrate_pixel_filter(trained, val)
    upper, total = 0, 0
    for s in val[:16]:
        mask = s.mask.copy()
        mask[:8] = (mask[:8] + 1 + np.arange(16) % (CFG.num_classes - 1)) % CFG.num_classes
        out, _ = pixel_filter(s.image, mask, trained, calibration=cal)
        dropped = out == IGNORE_INDEX
        upper += dropped[:8].sum()
        total += dropped.sum()
    assert total > 0 and upper / total >= 0.6


def test_calibration_shape(scenes, trained):
    _, val = scenes
    cal = calibrate_pixel_filter(trained, val)
    assert cal.shape == (CFG.num_classes,) and np.all(cal > 0)
