import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reclip.core import IGNORE
from reclip.metrics import (
    DistanceCurve,
    class_preference_score,
    confusion,
    distance_curve,
    evaluate_labels,
    miou,
    read_report,
    space_preference_score,
    write_curve_table,
    write_report,
)

from oracles import miou_oracle


def test_confusion_hand_cases():
    gt = np.array([[0, 1], [1, 0]])
    np.testing.assert_array_equal(confusion(gt, gt, 2), [[2, 0], [0, 2]])
    np.testing.assert_array_equal(confusion(gt, np.full((2, 2), IGNORE), 2), np.zeros((2, 2)))
    cm = confusion(np.array([0, 1, 1, 0]), np.array([0, 0, 1, 1]), 2)
    np.testing.assert_array_equal(cm, [[1, 1], [1, 1]])


def test_confusion_errors():
    with pytest.raises(ValueError, match="outside"):
        confusion(np.array([2]), np.array([0]), 2)
    with pytest.raises(ValueError, match="outside"):
        confusion(np.array([0]), np.array([3]), 2)
    with pytest.raises(ValueError, match="shape"):
        confusion(np.zeros(2), np.zeros(3), 2)


def test_miou_fixtures():
    m, iou = miou(np.array([[1, 1], [1, 1]]))
    assert abs(m - 1 / 3) < 1e-9
    np.testing.assert_allclose(iou, [1 / 3, 1 / 3])
    assert miou(np.diag([3, 4, 5]))[0] == 1.0
    m, iou = miou(np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert m == 1.0 and np.isnan(iou[2])
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(C=st.integers(2, 4), seed=st.integers(0, 10**6))
def test_miou_oracle(C, seed):
    g = np.random.default_rng(seed)
    gt = g.integers(0, C, (5, 6))
    gt[g.random((5, 6)) < 0.1] = IGNORE
    pred = g.integers(0, C, (5, 6))
    if np.all(gt == IGNORE):
        return
    got = miou(confusion(pred, gt, C))[0]
    assert got == pytest.approx(miou_oracle(pred, gt, C), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_miou_invariant_under_label_permutation(seed):
    g = np.random.default_rng(seed)
    C = 4
    gt, pred = g.integers(0, C, (6, 6)), g.integers(0, C, (6, 6))
    perm = g.permutation(C)
    assert miou(confusion(perm[pred], perm[gt], C))[0] == pytest.approx(
        miou(confusion(pred, gt, C))[0], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_confusion_additive(seed):
    g = np.random.default_rng(seed)
    a, b = [g.integers(0, 3, (4, 5)) for _ in range(2)]
    c, d = [g.integers(0, 3, (3, 5)) for _ in range(2)]
    joint = confusion(np.concatenate([a, c]), np.concatenate([b, d]), 3)
    np.testing.assert_array_equal(confusion(a, b, 3) + confusion(c, d, 3), joint)
    np.testing.assert_array_equal(confusion(a, b, 3).sum(1), np.bincount(b.ravel(), minlength=3))


def test_class_preference_fixtures():
    assert class_preference_score(np.diag([4, 2])) == 1.0
    assert class_preference_score(np.array([[1, 1], [1, 1]])) == 0.0
    # zero rows are skipped
    assert class_preference_score(np.array([[3, 0, 0], [0, 0, 0], [1, 0, 1]])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        class_preference_score(np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_class_preference_bounded_and_one_iff_diagonal(seed):
    g = np.random.default_rng(seed)
    cm = g.integers(0, 5, (3, 3))
    s = class_preference_score(cm) if cm.sum(1).any() else None
    if s is None:
        return
    assert -1 <= s <= 1
    valid = cm.sum(1) > 0
    off = cm[valid] * (1 - np.eye(3, dtype=int)[valid])
    assert (s == 1.0) == (off.sum() == 0)


def _curve(values, centers):
    edges = np.linspace(0, 1, len(values) + 1)
    assert np.allclose(0.5 * (edges[:-1] + edges[1:]), centers)
    return DistanceCurve(edges, np.asarray(values, float), np.ones(len(values), int),
                         np.zeros((len(values), 2, 2)))


def test_space_preference_fixtures():
    assert space_preference_score(_curve([0.9, 0.7, 0.5], [1 / 6, 0.5, 5 / 6])) == pytest.approx(-0.6)
    edges = np.array([0.0, 0.2, 0.8, 1.0])  # centres 0.1, 0.5, 0.9
    curve = DistanceCurve(edges, np.array([0.9, 0.7, 0.5]), np.ones(3, int), np.zeros((3, 2, 2)))
    assert space_preference_score(curve) == -0.5
    assert space_preference_score(_curve([0.4, 0.4, 0.4, 0.4], [0.125, 0.375, 0.625, 0.875])) == 0.0


def test_space_preference_skips_unsupported_bins():
    edges = np.linspace(0, 1, 5)
    curve = DistanceCurve(edges, np.array([0.8, np.nan, np.nan, 0.2]),
                          np.array([5, 0, 0, 5]), np.zeros((4, 2, 2)))
    assert space_preference_score(curve) == pytest.approx(-0.8)
    single = DistanceCurve(edges, np.array([0.8, np.nan, np.nan, np.nan]),
                           np.array([5, 0, 0, 0]), np.zeros((4, 2, 2)))
    with pytest.raises(ValueError, match="at least 2"):
        space_preference_score(single)


def _disc(size, center, radius, cls):
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), dtype=np.int64)
    m[(yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2] = cls
    return m


def test_distance_curve_centered_object():
    gt = _disc(65, (32, 32), 8, 1)
    gt_obj = np.where(gt == 1, 1, IGNORE)
    curve = distance_curve([gt_obj], [gt_obj], 2, bins=10)
    assert curve.pixels[0] == (gt == 1).sum() and curve.pixels[1:].sum() == 0


def test_distance_curve_perfect_prediction():
    gts = [_disc(64, c, 10, 1 + i % 2) for i, c in enumerate([(32, 32), (12, 12), (50, 20)])]
    curve = distance_curve(gts, gts, 3, bins=5)
    assert np.all(curve.miou[curve.supported] == 1.0)
    assert curve.pixels.sum() == sum(g.size for g in gts)


def test_distance_curve_drops_small_instances_and_needs_objects():
    gt = np.full((20, 20), IGNORE)
    gt[0:3, 0:3] = 1
    with pytest.raises(ValueError, match="no object"):
        distance_curve([gt], [gt], 2, min_pixels=16)
    with pytest.raises(ValueError):
        distance_curve([gt], [gt], 2, bins=1)


def test_distance_curve_pixel_count_property(rng):
    gts = [rng.integers(0, 3, (16, 16)) for _ in range(3)]
    curve = distance_curve(gts, gts, 3, bins=4, min_pixels=1)
    assert curve.pixels.sum() == sum(g.size for g in gts)


def test_perfect_prediction_scores():
    gts = [_disc(64, c, 10, 1) for c in [(32, 32), (10, 10), (54, 54), (10, 50)]]
    res = evaluate_labels(gts, gts, 2, bins=4)
    assert res.miou == 1.0 and res.class_preference == 1.0 and res.space_preference == 0.0


def test_report_round_trip(tmp_path):
    path = tmp_path / "r.txt"
    write_report(path, {"miou": 1 / 3, "iou.cow": float("nan"), "name": "x"})
    assert path.read_text().splitlines()[0] == "miou: 0.3333333333333333"
    back = read_report(path)
    assert back["miou"] == 1 / 3 and np.isnan(back["iou.cow"]) and back["name"] == "x"


def test_curve_table(tmp_path):
    edges = np.linspace(0, 1, 3)
    curve = DistanceCurve(edges, np.array([0.5, np.nan]), np.array([3, 0]), np.zeros((2, 2, 2)))
    path = tmp_path / "c.tsv"
    write_curve_table(path, curve)
    assert path.read_text().splitlines() == ["# distance\tmiou", "0.250000\t0.500000"]
