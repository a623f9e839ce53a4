"""
Geometric predicates on 7-DoF boxes: axis-aligned and bird's-eye-view
rotated IoU, collision fraction and point containment.
"""
from __future__ import annotations
from dataclasses import dataclass
import logging
import math
import numpy as np
from proto_miner.model import Box3D
from proto_miner.utils import RotatedBoxError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OverlapReport:
    """
    Overlap of a first box `a` with a second box `b`.

    Attributes
    ----------
    intersection_volume : float
        Shared volume in cubic meters.
    union_volume : float
        ``vol(a) + vol(b) - intersection``.
    iou : float
        Intersection over union, symmetric in the two boxes.
    collision_fraction : float
        Intersection over the volume of the first box; not symmetric.
    """

    intersection_volume: float
    union_volume: float
    iou: float
    collision_fraction: float


def _interval_overlap(low_a: float, high_a: float,
                      low_b: float, high_b: float) -> float:
    return max(0.0, min(high_a, high_b) - max(low_a, low_b))


def _report(a: Box3D, b: Box3D, intersection: float) -> OverlapReport:
    volume_a = a.volume()
    intersection = min(intersection, volume_a, b.volume())
    union = volume_a + b.volume() - intersection
    return OverlapReport(intersection_volume=intersection,
                         union_volume=union,
                         iou=min(1.0, intersection / union),
                         collision_fraction=min(1.0, intersection / volume_a))


def iou_axis_aligned(a: Box3D, b: Box3D) -> OverlapReport:
    """
    Exact overlap of two axis-aligned boxes.

    Parameters
    ----------
    a, b : Box3D
        Boxes with ``yaw = 0``.

    Returns
    -------
    OverlapReport
        Overlap of `a` with `b`.

    Raises
    ------
    RotatedBoxError
        If either box is yawed; use `iou_bev_rotated` instead.

    Example
    -------
    >>> a = Box3D(1, 1, 1, 2, 2, 2)
    >>> b = Box3D(2, 2, 2, 2, 2, 2)
    >>> iou_axis_aligned(a, b).iou
    0.06666666666666667
    """
    if not (a.is_axis_aligned and b.is_axis_aligned):
        raise RotatedBoxError("iou_axis_aligned needs yaw = 0 boxes; use "
                              "iou_bev_rotated for yawed boxes")
    intersection = 1.0
    for center, extent in (("cx", "dx"), ("cy", "dy"), ("cz", "dz")):
        half_a = getattr(a, extent) / 2.0
        half_b = getattr(b, extent) / 2.0
        intersection *= _interval_overlap(
            getattr(a, center) - half_a, getattr(a, center) + half_a,
            getattr(b, center) - half_b, getattr(b, center) + half_b)
    return _report(a, b, intersection)


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """
    Sutherland-Hodgman clipping of a polygon by a convex polygon.

    Both polygons are given counter-clockwise as (n, 2) arrays. Points on a
    clip edge count as inside.

    Returns
    -------
    np.ndarray
        Vertices of the intersection polygon, possibly empty.
    """
    output = list(subject)
    n_clip = len(clip)
    for i in range(n_clip):
        if not output:
            break
        edge_start, edge_end = clip[i], clip[(i + 1) % n_clip]
        edge = edge_end - edge_start

        def side(point: np.ndarray) -> float:
            offset = point - edge_start
            return edge[0] * offset[1] - edge[1] * offset[0]

        vertices, output = output, []
        previous = vertices[-1]
        previous_side = side(previous)
        for current in vertices:
            current_side = side(current)
            if current_side >= 0.0:
                if previous_side < 0.0:
                    t = previous_side / (previous_side - current_side)
                    output.append(previous + t * (current - previous))
                output.append(current)
            elif previous_side >= 0.0:
                t = previous_side / (previous_side - current_side)
                output.append(previous + t * (current - previous))
            previous, previous_side = current, current_side
    return np.array(output).reshape(-1, 2)


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area of a simple polygon."""
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1))
                           - np.dot(y, np.roll(x, -1))))


def iou_bev_rotated(a: Box3D, b: Box3D) -> OverlapReport:
    """
    Overlap of two yawed boxes.

    The intersection is the area of the clipped ground-plane rectangles times
    the overlap of the vertical intervals. With both yaws at 0 the result
    agrees with `iou_axis_aligned`. The two boxes are clipped in a fixed
    order so that the IoU is exactly symmetric.

    Parameters
    ----------
    a, b : Box3D
        Boxes with any yaw.

    Returns
    -------
    OverlapReport
        Overlap of `a` with `b`; a degenerate clip gives a zero intersection.
    """
    low_a, high_a = a.z_range()
    low_b, high_b = b.z_range()
    height = _interval_overlap(low_a, high_a, low_b, high_b)
    if height == 0.0:
        return _report(a, b, 0.0)
    first, second = sorted((a, b), key=Box3D.as_list)
    area = polygon_area(clip_convex_polygon(first.bev_corners(),
                                            second.bev_corners()))
    return _report(a, b, area * height)


def overlap(a: Box3D, b: Box3D) -> OverlapReport:
    """
    Dispatches to the axis-aligned routine when both yaws are 0, to the
    rotated one otherwise.
    """
    if a.is_axis_aligned and b.is_axis_aligned:
        return iou_axis_aligned(a, b)
    return iou_bev_rotated(a, b)


def collision(pseudo_box: Box3D, true_box: Box3D,
              metric: str = "fraction") -> float:
    """
    Collision of a pseudo box with an annotated box.

    Parameters
    ----------
    pseudo_box, true_box : Box3D
        Pseudo label box first.
    metric : str, optional
        ``"fraction"`` (intersection over the pseudo-box volume, default) or
        ``"iou"``.
    """
    report = overlap(pseudo_box, true_box)
    if metric == "iou":
        return report.iou
    if metric == "fraction":
        return report.collision_fraction
    raise ValueError(f"unknown collision metric {metric!r}")


def contains_point(box: Box3D, point) -> bool:
    """
    Tells whether a point lies in a box, boundary included.

    The point is rotated into the box frame by the inverse yaw about the box
    center and compared to the half extents.

    Example
    -------
    >>> contains_point(Box3D(0, 0, 0, 2, 2, 2), (1.0, 1.0, 1.0))
    True
    """
    x, y, z = (float(value) for value in point)
    offset_x, offset_y = x - box.cx, y - box.cy
    cos, sin = math.cos(box.yaw), math.sin(box.yaw)
    local_x = cos * offset_x + sin * offset_y
    local_y = -sin * offset_x + cos * offset_y
    return (abs(local_x) <= box.dx / 2.0 and abs(local_y) <= box.dy / 2.0
            and abs(z - box.cz) <= box.dz / 2.0)


def contains_points(box: Box3D, points: np.ndarray) -> np.ndarray:
    """
    Vectorized `contains_point` over an (n, 3) array.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    offset = points[:, :2] - np.array([box.cx, box.cy])
    cos, sin = math.cos(box.yaw), math.sin(box.yaw)
    local_x = cos * offset[:, 0] + sin * offset[:, 1]
    local_y = -sin * offset[:, 0] + cos * offset[:, 1]
    return ((np.abs(local_x) <= box.dx / 2.0)
            & (np.abs(local_y) <= box.dy / 2.0)
            & (np.abs(points[:, 2] - box.cz) <= box.dz / 2.0))
