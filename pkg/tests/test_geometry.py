import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tbps.errors import PreconditionError
from tbps.geometry import (Box, box_loss, box_loss_matrix, cxcywh_to_xyxy, giou, giou_matrix,
                           iou, iou_matrix, l1_distance, xyxy_to_cxcywh)

from oracles import formula_giou, raster_iou

A = Box(0.0, 0.0, 0.2, 0.2)
B = Box(0.1, 0.1, 0.3, 0.3)


@st.composite
def boxes(draw):
    x = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    y = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    return Box(x[0], y[0], x[1], y[1])


def test_iou_examples():
    q = Box(0, 0, 0.5, 0.5)
    assert iou(q, q) == 1.0
    assert iou(A, Box(0.5, 0.5, 0.9, 0.9)) == 0.0
    # oracle: rasterized grid count
    assert iou(A, B) == pytest.approx(raster_iou(A.as_array(), B.as_array()), abs=1e-12)
    assert iou(A, B) == pytest.approx(1 / 7)


def test_giou_examples():
    assert giou(A, A) == 1.0
    assert giou(A, B) == pytest.approx(formula_giou(A.as_array(), B.as_array()), abs=1e-15)
    assert giou(A, B) == pytest.approx(-5 / 63)
    tiny = giou(Box(0, 0, 1e-4, 1e-4), Box(1 - 1e-4, 1 - 1e-4, 1, 1))
    assert -1 < tiny < -0.9999


def test_box_loss_examples():
    assert box_loss(A, A) == 0.0
    assert box_loss(A, B) == pytest.approx((1 + 5 / 63) + 0.4)
    assert box_loss(B, A) == box_loss(A, B)
    assert l1_distance(A, B) == pytest.approx(0.4)


@pytest.mark.parametrize("coords", [
    (0.2, 0.1, 0.2, 0.5),  # zero width
    (0.3, 0.1, 0.2, 0.5),  # inverted
    (-0.1, 0.0, 0.5, 0.5),
    (0.0, 0.0, 1.2, 0.5),
    (0.0, float("nan"), 0.5, 0.5),
])
def test_invalid_boxes_rejected(coords):
    with pytest.raises(PreconditionError):
        Box(*coords)
    with pytest.raises(PreconditionError):
        iou(coords, A)


def test_center_format_roundtrip():
    b = Box.from_cxcywh(0.5, 0.4, 0.2, 0.3)
    assert b.to_cxcywh() == pytest.approx((0.5, 0.4, 0.2, 0.3))
    arr = np.array([[0.1, 0.2, 0.4, 0.8], [0.0, 0.0, 1.0, 1.0]])
    np.testing.assert_allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(arr)), arr, atol=1e-15)


@given(boxes(), boxes())
def test_pairwise_properties(a, b):
    v, g = iou(a, b), giou(a, b)
    assert 0.0 <= v <= 1.0
    assert -1.0 <= g <= v
    # the strict lower bound is only representable once union / enclosure exceeds an ulp of 1
    if min(a.x2 - a.x1, a.y2 - a.y1, b.x2 - b.x1, b.y2 - b.y1) >= 1e-6:
        assert g > -1.0
    assert iou(b, a) == v and giou(b, a) == g
    assert box_loss(a, b) >= 0.0
    assert (box_loss(a, b) == 0.0) == (a == b)


@given(boxes(), boxes())
def test_giou_equals_iou_iff_enclosure_is_union(a, b):
    enc = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    inter = max(0, min(a.x2, b.x2) - max(a.x1, b.x1)) * max(0, min(a.y2, b.y2) - max(a.y1, b.y1))
    union = a.area + b.area - inter
    gap = (enc - union) / enc
    assert iou(a, b) - giou(a, b) == pytest.approx(gap, abs=1e-12)


def test_containment_does_not_imply_equality():
    outer, inner = Box(0, 0, 1, 1), Box(0.4, 0.4, 0.6, 0.6)
    assert giou(outer, inner) == pytest.approx(iou(outer, inner))  # enclosure == union here
    side = Box(0, 0, 0.5, 1), Box(0.5, 0, 1, 1)
    assert giou(*side) == pytest.approx(iou(*side)) == pytest.approx(0.0)
    apart = Box(0, 0, 0.2, 0.2), Box(0.6, 0.6, 0.8, 0.8)
    assert giou(*apart) < iou(*apart)


def test_matrices_agree_with_scalar_versions():
    rng = np.random.default_rng(0)
    lo = rng.uniform(0, 0.5, (20, 2))
    arr = np.hstack([lo, lo + rng.uniform(0.05, 0.5, (20, 2))])
    a, b = arr[:8], arr[8:]
    for i in range(len(a)):
        for j in range(len(b)):
            ba, bb = Box.from_array(a[i]), Box.from_array(b[j])
            assert iou_matrix(a, b)[i, j] == pytest.approx(iou(ba, bb), abs=1e-15)
            assert giou_matrix(a, b)[i, j] == pytest.approx(giou(ba, bb), abs=1e-15)
            assert box_loss_matrix(a, b)[i, j] == pytest.approx(box_loss(ba, bb), abs=1e-14)


def test_iou_matches_raster_oracle_on_samples():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        lo = rng.uniform(0, 0.5, (2, 2))
        arr = np.hstack([lo, lo + rng.uniform(0.1, 0.5, (2, 2))])
        worst = max(worst, abs(iou(arr[0], arr[1]) - raster_iou(arr[0], arr[1])))
    assert worst < 2e-3
    assert math.isfinite(worst)


def test_giou_never_exceeds_iou_for_nested_boxes():
    outer = [0.33530775, 0.02454065, 0.87761068, 0.87897441]
    inner = [0.52671947, 0.27264745, 0.65705304, 0.80066574]
    assert giou(outer, inner) <= iou(outer, inner)
    assert giou_matrix(np.array([outer]), np.array([inner]))[0, 0] <= iou(outer, inner)
