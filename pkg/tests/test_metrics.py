import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chanfuse.metrics import UndefinedMetricError, boundary, dice, evaluate_masks, hausdorff, iou


def brute_boundary(mask):
    h, w = mask.shape
    out = set()
    for y, x in itertools.product(range(h), range(w)):
        if not mask[y, x]:
            continue
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                out.add((y, x))
                break
    return out


def brute_hausdorff(a, b):
    pa, pb = brute_boundary(a), brute_boundary(b)

    def directed(p, q):
        return max(min(math.hypot(y1 - y2, x1 - x2) for y2, x2 in q) for y1, x1 in p)

    return max(directed(pa, pb), directed(pb, pa))


def brute_dice(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2 * inter / total


def brute_iou(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    union = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x or y)
    return 1.0 if union == 0 else inter / union


def test_half_overlap_examples():
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[0, 1, 1, 0]])
    assert dice(a, b) == 0.5
    assert iou(a, b) == pytest.approx(1 / 3)


def test_single_pixels_at_three_four_five():
    a = np.zeros((5, 5), bool)
    b = np.zeros((5, 5), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff(a, b) == 5.0


def test_identical_and_empty_masks():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert dice(m, m) == 1.0 and iou(m, m) == 1.0 and hausdorff(m, m) == 0.0
    empty = np.zeros((4, 4), bool)
    assert dice(empty, empty) == 1.0
    assert dice(m, empty) == 0.0
    with pytest.raises(UndefinedMetricError):
        hausdorff(m, empty)


def test_boundary_of_filled_square_is_its_ring():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    ring = boundary(m)
    assert ring.sum() == 12
    assert not ring[2:4, 2:4].any()
    assert boundary(np.ones((3, 3), bool)).sum() == 8  # the image edge counts as outside


def test_random_pairs_match_brute_force_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        b = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        a[0, 0] = b[15, 15] = True
        assert abs(dice(a, b) - brute_dice(a, b)) < 1e-9
        assert abs(iou(a, b) - brute_iou(a, b)) < 1e-9
        assert abs(hausdorff(a, b) - brute_hausdorff(a, b)) < 1e-9


masks = arrays(np.bool_, (8, 8))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dice_iou_identity_and_symmetry(a, b):
    d, j = dice(a, b), iou(a, b)
    assert 0 <= j <= d <= 1
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert d == dice(b, a) and j == iou(b, a)
    if a.any() and b.any():
        assert hausdorff(a, b) == hausdorff(b, a) >= 0


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_adding_a_true_positive_never_lowers_overlap(a, b):
    missed = np.argwhere(b & ~a)
    if len(missed) == 0:
        return
    grown = a.copy()
    grown[tuple(missed[0])] = True
    assert dice(grown, b) >= dice(a, b)
    assert iou(grown, b) >= iou(a, b)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))


def test_report_averages_per_class():
    a = np.array([[0, 1], [2, 2]])
    b = np.array([[0, 1], [2, 0]])
    report = evaluate_masks([a, b], [a, a], num_classes=3)
    assert sorted(report.dice) == [1, 2]
    assert report.dice[1] == 1.0
    assert report.dice[2] == pytest.approx((1.0 + 2 / 3) / 2)
    csv_text = report.to_csv()
    assert csv_text.splitlines()[0] == "class,dice,iou,hd,samples"
    assert csv_text.splitlines()[-1].startswith("mean,")


def test_report_hausdorff_is_none_when_undefined():
    z = np.zeros((4, 4), int)
    report = evaluate_masks([z], [z])
    assert report.dice[1] == 1.0 and report.hausdorff[1] is None
