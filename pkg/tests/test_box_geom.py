import math
import pytest
import numpy as np
from hypothesis import given, settings as hyp_settings, strategies as st
from proto_miner import box_geom as bg
from proto_miner.model import Box3D
from proto_miner.utils import RotatedBoxError

coordinates = st.floats(-5.0, 5.0)
extents = st.floats(0.1, 5.0)
boxes = st.builds(Box3D, coordinates, coordinates, coordinates,
                  extents, extents, extents, st.floats(-3.0, 3.0))
aligned_boxes = st.builds(Box3D, coordinates, coordinates, coordinates,
                          extents, extents, extents)


@pytest.fixture
def unit_box():
    return Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0)

# Test `iou_axis_aligned`


def test_identical_boxes(unit_box):
    report = bg.iou_axis_aligned(unit_box, unit_box)
    assert report.iou == 1.0
    assert report.collision_fraction == 1.0
    assert report.union_volume == 1.0


def test_shifted_cubes():
    report = bg.iou_axis_aligned(Box3D(1, 1, 1, 2, 2, 2),
                                 Box3D(2, 2, 2, 2, 2, 2))
    assert report.intersection_volume == 1.0
    assert report.iou == pytest.approx(1.0 / 15.0)


def test_disjoint_boxes(unit_box):
    report = bg.iou_axis_aligned(unit_box, Box3D(3.0, 0.0, 0.0, 1, 1, 1))
    assert report.iou == 0.0 and report.collision_fraction == 0.0


def test_touching_faces_do_not_overlap(unit_box):
    report = bg.iou_axis_aligned(unit_box, Box3D(1.0, 0.0, 0.0, 1, 1, 1))
    assert report.iou == 0.0


def test_collision_fraction_is_asymmetric(unit_box):
    big = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 2.0)
    assert bg.iou_axis_aligned(unit_box, big).collision_fraction == 1.0
    assert bg.iou_axis_aligned(big, unit_box).collision_fraction == 0.125
    assert bg.iou_axis_aligned(unit_box, big).iou == 0.125


def test_axis_aligned_rejects_yaw(unit_box):
    with pytest.raises(RotatedBoxError):
        bg.iou_axis_aligned(unit_box, Box3D(0, 0, 0, 1, 1, 1, 0.3))

# Test `iou_bev_rotated`


def test_square_rotated_by_quarter_turn_matches_itself(unit_box):
    turned = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, math.pi / 2.0)
    assert bg.iou_bev_rotated(unit_box, turned).iou == pytest.approx(1.0)


def test_square_rotated_by_eighth_turn(unit_box):
    turned = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, math.pi / 4.0)
    octagon = 2.0 * (math.sqrt(2.0) - 1.0)
    report = bg.iou_bev_rotated(unit_box, turned)
    assert report.intersection_volume == pytest.approx(octagon)
    assert report.iou == pytest.approx(octagon / (2.0 - octagon))


def test_vertical_gap_gives_zero(unit_box):
    above = Box3D(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.4)
    assert bg.iou_bev_rotated(unit_box, above).iou == 0.0


def test_rotated_overlap_agrees_with_monte_carlo():
    a = Box3D(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, 0.5)
    b = Box3D(1.0, 0.5, 0.5, 3.0, 2.0, 2.0, -0.3)
    rng = np.random.default_rng(11)
    low, high = np.array([-4.0, -4.0, -1.5]), np.array([4.0, 4.0, 1.5])
    points = rng.uniform(low, high, size=(400_000, 3))
    inside = bg.contains_points(a, points) & bg.contains_points(b, points)
    estimate = inside.mean() * np.prod(high - low)
    report = bg.iou_bev_rotated(a, b)
    assert report.intersection_volume == pytest.approx(estimate, rel=0.03)


def points_inside(box, n, rng):
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * [box.dx, box.dy, box.dz]
    cos, sin = math.cos(box.yaw), math.sin(box.yaw)
    x = cos * local[:, 0] - sin * local[:, 1]
    y = sin * local[:, 0] + cos * local[:, 1]
    return np.column_stack([x, y, local[:, 2]]) + box.center


def moved(box, angle, shift=(0.0, 0.0, 0.0)):
    cos, sin = math.cos(angle), math.sin(angle)
    return Box3D(cos * box.cx - sin * box.cy + shift[0],
                 sin * box.cx + cos * box.cy + shift[1], box.cz + shift[2],
                 box.dx, box.dy, box.dz, box.yaw + angle)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("yawed", [False, True])
def test_iou_agrees_with_monte_carlo_on_random_pairs(seed, yawed):
    rng = np.random.default_rng(seed)
    a, b = [Box3D(*rng.uniform(-1.0, 1.0, size=3),
                  *rng.uniform(0.5, 3.0, size=3),
                  rng.uniform(-3.0, 3.0) if yawed else 0.0)
            for _ in range(2)]
    inside = bg.contains_points(b, points_inside(a, 200_000, rng)).mean()
    intersection = inside * a.volume()
    estimate = intersection / (a.volume() + b.volume() - intersection)
    assert bg.overlap(a, b).iou == pytest.approx(estimate, abs=0.01)


@given(boxes, boxes, st.floats(-math.pi, math.pi))
@hyp_settings(max_examples=100, deadline=None)
def test_iou_is_unchanged_by_a_common_rotation(a, b, angle):
    assert bg.overlap(moved(a, angle), moved(b, angle)).iou == \
        pytest.approx(bg.overlap(a, b).iou, abs=1e-9)


@given(boxes, boxes, st.tuples(st.floats(-50.0, 50.0),
                               st.floats(-50.0, 50.0),
                               st.floats(-5.0, 5.0)))
@hyp_settings(max_examples=100, deadline=None)
def test_iou_is_unchanged_by_a_common_translation(a, b, shift):
    assert bg.overlap(moved(a, 0.0, shift), moved(b, 0.0, shift)).iou == \
        pytest.approx(bg.overlap(a, b).iou, abs=1e-9)


@given(aligned_boxes, aligned_boxes)
@hyp_settings(max_examples=100, deadline=None)
def test_rotated_routine_agrees_with_axis_aligned(a, b):
    exact = bg.iou_axis_aligned(a, b)
    rotated = bg.iou_bev_rotated(a, b)
    assert rotated.iou == pytest.approx(exact.iou, abs=1e-9)


@given(boxes, boxes)
@hyp_settings(max_examples=100, deadline=None)
def test_iou_is_symmetric_and_bounded(a, b):
    forward = bg.overlap(a, b)
    backward = bg.overlap(b, a)
    assert forward.iou == backward.iou
    assert 0.0 <= forward.iou <= 1.0
    assert 0.0 <= forward.collision_fraction <= 1.0


@given(boxes)
@hyp_settings(max_examples=50, deadline=None)
def test_box_overlaps_itself_fully(box):
    assert bg.overlap(box, box).iou == pytest.approx(1.0)

# Test `collision`


def test_collision_metrics(unit_box):
    big = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 2.0)
    assert bg.collision(unit_box, big) == 1.0
    assert bg.collision(unit_box, big, metric="iou") == 0.125


def test_collision_rejects_unknown_metric(unit_box):
    with pytest.raises(ValueError, match="unknown collision metric"):
        bg.collision(unit_box, unit_box, metric="volume")

# Test `contains_point` and `contains_points`


def test_contains_point_boundary_included(unit_box):
    assert bg.contains_point(unit_box, (0.5, 0.5, 0.5))
    assert not bg.contains_point(unit_box, (0.5001, 0.0, 0.0))


def test_contains_point_respects_yaw():
    box = Box3D(0.0, 0.0, 0.0, 4.0, 1.0, 1.0, math.pi / 2.0)
    assert bg.contains_point(box, (0.0, 1.8, 0.0))
    assert not bg.contains_point(box, (1.8, 0.0, 0.0))


def test_contains_points_matches_scalar_version():
    box = Box3D(1.0, -1.0, 0.5, 3.0, 2.0, 1.0, 0.7)
    points = np.random.default_rng(5).uniform(-3.0, 3.0, size=(500, 3))
    expected = [bg.contains_point(box, point) for point in points]
    assert bg.contains_points(box, points).tolist() == expected
