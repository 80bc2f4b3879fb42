import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointrgcn.geom import (
    Box7, PointCloud, bev_corners, box_corners, canonicalize, canonicalize_box, decanonicalize,
    decanonicalize_box, iou_3d, iou_3d_matrix, iou_bev, iou_bev_matrix, iou_matrix, nms,
    points_in_box, wrap_angle,
)

from oracles import box_contains, mc_iou

angles = st.floats(-10, 10, allow_nan=False)
coords = st.floats(-20, 20, allow_nan=False)
dims = st.floats(0.2, 5.0, allow_nan=False)
boxes = st.builds(Box7, coords, coords, coords, dims, dims, dims, angles)


@given(angles)
def test_wrap_angle_range(t):
    w = wrap_angle(t)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(t), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(t), abs_tol=1e-9)


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    np.testing.assert_allclose(wrap_angle(np.array([0.0, 2 * math.pi, -0.5])), [0, 0, -0.5], atol=1e-12)


def test_box_validation_and_theta_wrap():
    with pytest.raises(ValueError, match="dimension w"):
        Box7(0, 0, 0, 1, 0, 1, 0)
    with pytest.raises(ValueError):
        Box7(0, 0, 0, -1, 1, 1, 0)
    assert Box7(0, 0, 0, 1, 1, 1, 2 * math.pi + 0.25).theta == pytest.approx(0.25)


def test_pointcloud_feature_rows_checked():
    with pytest.raises(ValueError, match="feature rows"):
        PointCloud(np.zeros((3, 3)), np.zeros((2, 1)))


@given(boxes, st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=10))
def test_canonical_roundtrip(box, pts):
    p = np.array(pts)
    np.testing.assert_allclose(decanonicalize(canonicalize(p, box), box), p, atol=1e-9)


def test_canonical_axes():
    # heading pi/2: local +x (length) maps to world -z
    box = Box7(1, 2, 3, 1, 1, 4, math.pi / 2)
    np.testing.assert_allclose(decanonicalize([[1, 0, 0]], box)[0], [1, 2, 2], atol=1e-12)
    np.testing.assert_allclose(canonicalize(np.array([[1.0, 2, 2]]), box)[0], [1, 0, 0], atol=1e-12)


def test_canonical_pointcloud_keeps_features():
    cloud = PointCloud(np.ones((2, 3)), np.array([[5.0], [6.0]]))
    out = canonicalize(cloud, Box7(1, 1, 1, 1, 1, 1, 0.3))
    np.testing.assert_array_equal(out.feats, cloud.feats)
    np.testing.assert_allclose(out.coords, 0, atol=1e-12)


@given(boxes, boxes)
def test_box_frame_roundtrip(a, frame):
    b = decanonicalize_box(canonicalize_box(a, frame), frame)
    np.testing.assert_allclose(b.center, a.center, atol=1e-9)
    assert math.isclose(math.cos(b.theta - a.theta), 1.0, abs_tol=1e-9)


@given(boxes)
def test_corners_match_oracle_inclusion(box):
    c = box_corners(box)
    # shrink slightly toward the centre so corners are strictly inside
    inner = box.center + 0.999 * (c - box.center)
    assert box_contains(inner, box.to_array()).all()
    np.testing.assert_allclose(c.mean(axis=0), box.center, atol=1e-9)
    bev = bev_corners([box])[0]
    # the BEV quad is the bottom face projected
    np.testing.assert_allclose(np.sort(bev, axis=0), np.sort(c[:4][:, [0, 2]], axis=0), atol=1e-9)


@given(boxes)
def test_bev_corners_ccw(box):
    q = bev_corners([box])[0]
    x, z = q[:, 0], q[:, 1]
    area = 0.5 * np.sum(x * np.roll(z, -1) - np.roll(x, -1) * z)
    assert area == pytest.approx(box.w * box.l, rel=1e-9)


def test_points_in_box_matches_oracle():
    rng = np.random.default_rng(3)
    box = Box7(1.0, -0.5, 2.0, 1.5, 1.6, 3.9, 0.7)
    pts = rng.uniform(-4, 5, size=(4000, 3))
    idx = points_in_box(pts, box)
    np.testing.assert_array_equal(idx, np.flatnonzero(box_contains(pts, box.to_array())))
    grown = Box7(1.0, -0.5, 2.0, 2.5, 2.6, 4.9, 0.7)
    np.testing.assert_array_equal(points_in_box(pts, box, 0.5), np.flatnonzero(box_contains(pts, grown.to_array())))
    with pytest.raises(ValueError):
        points_in_box(pts, box, -1)


# ---------------------------------------------------------------- IoU


def test_iou_analytic_third_overlaps():
    a = Box7(0, 0, 0, 1, 1, 1, 0)
    shifted = Box7(0.5, 0, 0, 1, 1, 1, 0)
    assert iou_bev(a, shifted) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_3d(a, shifted) == pytest.approx(1 / 3, abs=1e-12)
    # same footprint, half vertical overlap of 2 m tall boxes
    tall = Box7(0, 0, 0, 2, 1, 1, 0)
    lifted = Box7(0, 1, 0, 2, 1, 1, 0)
    assert iou_bev(tall, lifted) == pytest.approx(1.0)
    assert iou_3d(tall, lifted) == pytest.approx(1 / 3, abs=1e-12)
    # shift along local length after a yaw of 90 degrees is a shift in world z
    r = Box7(0, 0, 0, 1, 1, 1, math.pi / 2)
    rz = Box7(0, 0, 0.5, 1, 1, 1, math.pi / 2)
    assert iou_3d(r, rz) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_rotated_square_octagon():
    # unit square vs itself rotated 45 degrees: intersection is a regular octagon
    a = Box7(0, 0, 0, 1, 1, 1, 0)
    b = Box7(0, 0, 0, 1, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    assert iou_bev(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)


def test_iou_identical_disjoint_and_touching():
    a = Box7(0, 0, 0, 1.5, 1.6, 3.9, 0.3)
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(a, Box7(20, 0, 0, 1, 1, 1, 0)) == 0.0
    # edge contact has zero area
    assert iou_bev(Box7(0, 0, 0, 1, 1, 1, 0), Box7(1, 0, 0, 1, 1, 1, 0)) == 0.0
    # vertically disjoint
    assert iou_3d(a, Box7(0, 5, 0, 1.5, 1.6, 3.9, 0.3)) == 0.0


@settings(max_examples=60, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-9)
    v = iou_3d(a, b)
    assert 0 <= v <= 1
    assert v <= iou_bev(a, b) + 1e-9 or a.h != b.h


@settings(max_examples=40, deadline=None)
@given(boxes, st.floats(-math.pi, math.pi))
def test_iou_heading_flip_invariance(a, t):
    flipped = Box7(a.x, a.y, a.z, a.h, a.w, a.l, a.theta + math.pi)
    assert iou_3d(a, flipped) == pytest.approx(1.0, abs=1e-9)


def test_iou_matrix_shapes_and_mode():
    a = [Box7(0, 0, 0, 1, 1, 1, 0)] * 3
    assert iou_bev_matrix(a, a[:2]).shape == (3, 2)
    assert iou_3d_matrix([], a).shape == (0, 3)
    with pytest.raises(ValueError, match="IoU mode"):
        iou_matrix(a, a, "2d")


def test_iou_against_monte_carlo_sample():
    # a small version of the acceptance criterion, run on every test pass
    rng = np.random.default_rng(11)
    for _ in range(5):
        a = Box7(0, 0, 0, 1.5, 1.6, 3.9, rng.uniform(-3, 3))
        b = Box7(*rng.normal(0, 0.6, 3), 1.4, 1.7, 3.5, rng.uniform(-3, 3))
        assert iou_3d(a, b) == pytest.approx(mc_iou(a.to_array(), b.to_array(), 400_000, rng), abs=1e-2)
        assert iou_bev(a, b) == pytest.approx(mc_iou(a.to_array(), b.to_array(), 400_000, rng, bev=True), abs=1e-2)


# ---------------------------------------------------------------- NMS


def test_nms_basic_and_ties():
    a = Box7(0, 0, 0, 1, 1, 4, 0)
    near = Box7(0.3, 0, 0, 1, 1, 4, 0)
    far = Box7(10, 0, 0, 1, 1, 4, 0)
    assert nms([a, near, far], [0.9, 0.8, 0.1], 0.1) == [0, 2]
    assert nms([a, near, far], [0.5, 0.9, 0.1], 0.1) == [1, 2]
    # equal scores keep the lower index
    assert nms([a, near], [0.5, 0.5], 0.1) == [0]
    assert nms([], [], 0.1) == []
    with pytest.raises(ValueError):
        nms([a], [1, 2], 0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3), st.floats(0, 1)), min_size=1, max_size=12))
def test_nms_kept_pairwise_below_threshold(rows):
    bs = [Box7(x, 0, z, 1.5, 1.6, 3.9, t) for x, z, t, _ in rows]
    keep = nms(bs, [r[3] for r in rows], 0.1)
    kept = [bs[i] for i in keep]
    m = iou_bev_matrix(kept, kept)
    np.fill_diagonal(m, 0)
    assert (m < 0.1).all()
    # every suppressed box overlaps some kept box
    for i in set(range(len(bs))) - set(keep):
        assert iou_bev_matrix([bs[i]], kept).max() >= 0.1
