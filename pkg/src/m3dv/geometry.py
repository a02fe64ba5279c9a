"""Box algebra: 2D GIoU on (center, l, r, t, b) boxes, rotated BEV / 3D IoU, pinhole projection.

Camera frame follows KITTI: x right, y down, z forward. Yaw rotates about y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numeric import Tensor, ops

_CROSS_EPS = 1e-12


class GeometryError(ValueError):
    pass


class DegenerateBoxError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class Box2D:
    """Edge distances from a reference point, in normalised image units."""

    l: float
    r: float
    t: float
    b: float

    def __post_init__(self):
        if min(self.l, self.r, self.t, self.b) < 0:
            raise GeometryError(f"negative edge distance in {self}")
        if self.l + self.r > 1 + 1e-12 or self.t + self.b > 1 + 1e-12:
            raise GeometryError(f"box wider than the image: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.r, self.t, self.b])


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (length, width, height)
    yaw: float

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise GeometryError(f"box dimensions must be positive, got {self.dims}")


@dataclass(frozen=True)
class Calibration:
    P2: np.ndarray = field(repr=False)

    def __post_init__(self):
        P = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        if not (P[0, 0] > 0 and P[1, 1] > 0):
            raise GeometryError("P2 must have positive focal lengths")
        object.__setattr__(self, "P2", P)

    @classmethod
    def from_intrinsics(cls, fx: float, fy: float, cx: float, cy: float) -> "Calibration":
        return cls(np.array([[fx, 0, cx, 0], [0, fy, cy, 0], [0, 0, 1, 0]], dtype=np.float64))

    def __eq__(self, other):
        return isinstance(other, Calibration) and np.array_equal(self.P2, other.P2)

    def __hash__(self):
        return hash(self.P2.tobytes())


# KITTI training-set P2 for camera 2, used when no calibration file is given.
KITTI_P2 = np.array([
    [7.215377e02, 0.0, 6.095593e02, 4.485728e01],
    [0.0, 7.215377e02, 1.728540e02, 2.163791e-01],
    [0.0, 0.0, 1.0, 2.745884e-03],
])


def default_calibration() -> Calibration:
    return Calibration(KITTI_P2.copy())


# -- projection -----------------------------------------------------------------

def project_center(box: Box3D, calib: Calibration, image_size: tuple[float, float]) -> tuple[float, float]:
    x, y, z = box.center
    if z <= 0:
        raise BehindCameraError(f"object center at z={z} is not in front of the camera")
    u, v, w = calib.P2 @ np.array([x, y, z, 1.0])
    return float(u / w / image_size[0]), float(v / w / image_size[1])


def unproject_center(xc: float, yc: float, depth: float, calib: Calibration,
                     image_size: tuple[float, float]) -> tuple[float, float, float]:
    """Inverse of :func:`project_center` for a known depth (camera z)."""
    P = calib.P2
    u, v = xc * image_size[0], yc * image_size[1]
    w = P[2, 2] * depth + P[2, 3]
    A = np.array([[P[0, 0] - u * P[2, 0], P[0, 1] - u * P[2, 1]],
                  [P[1, 0] - v * P[2, 0], P[1, 1] - v * P[2, 1]]])
    rhs = np.array([u * w - P[0, 2] * depth - P[0, 3], v * w - P[1, 2] * depth - P[1, 3]])
    x, y = np.linalg.solve(A, rhs)
    return float(x), float(y), float(depth)


# -- 2D ---------------------------------------------------------------------------

def _edges(center, box: Box2D):
    cx, cy = center
    return cx - box.l, cy - box.t, cx + box.r, cy + box.b


def iou_2d(center_a, a: Box2D, center_b, b: Box2D) -> float:
    return _iou_giou(center_a, a, center_b, b)[0]


def giou_2d(center_a, a: Box2D, center_b, b: Box2D) -> float:
    return _iou_giou(center_a, a, center_b, b)[1]


def _iou_giou(center_a, a, center_b, b):
    ax1, ay1, ax2, ay2 = _edges(center_a, a)
    bx1, by1, bx2, by2 = _edges(center_b, b)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        raise DegenerateBoxError("GIoU of a zero-area box is undefined")
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    iou = inter / union
    return iou, iou - (hull - union) / hull


def giou_2d_batch(center_a: np.ndarray, lrtb_a: np.ndarray, center_b: np.ndarray, lrtb_b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU matrix between box sets a (n) and b (m)."""
    a = np.concatenate([center_a - lrtb_a[:, [0, 2]], center_a + lrtb_a[:, [1, 3]]], axis=1)[:, None]
    b = np.concatenate([center_b - lrtb_b[:, [0, 2]], center_b + lrtb_b[:, [1, 3]]], axis=1)[None]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    if np.any(area_a <= 0) or np.any(area_b <= 0):
        raise DegenerateBoxError("GIoU of a zero-area box is undefined")
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = ((np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
            * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])))
    return inter / union - (hull - union) / hull


def giou_2d_tensor(center_a, lrtb_a, center_b, lrtb_b) -> Tensor:
    """Row-aligned differentiable GIoU; inputs are (n, 2) centres and (n, 4) edge distances."""
    ax1 = ops.sub(center_a[:, 0], lrtb_a[:, 0])
    ax2 = ops.add(center_a[:, 0], lrtb_a[:, 1])
    ay1 = ops.sub(center_a[:, 1], lrtb_a[:, 2])
    ay2 = ops.add(center_a[:, 1], lrtb_a[:, 3])
    bx1 = ops.sub(center_b[:, 0], lrtb_b[:, 0])
    bx2 = ops.add(center_b[:, 0], lrtb_b[:, 1])
    by1 = ops.sub(center_b[:, 1], lrtb_b[:, 2])
    by2 = ops.add(center_b[:, 1], lrtb_b[:, 3])
    area_a = ops.mul(ops.sub(ax2, ax1), ops.sub(ay2, ay1))
    area_b = ops.mul(ops.sub(bx2, bx1), ops.sub(by2, by1))
    iw = ops.relu(ops.sub(ops.minimum(ax2, bx2), ops.maximum(ax1, bx1)))
    ih = ops.relu(ops.sub(ops.minimum(ay2, by2), ops.maximum(ay1, by1)))
    inter = ops.mul(iw, ih)
    union = ops.sub(ops.add(area_a, area_b), inter)
    hull = ops.mul(ops.sub(ops.maximum(ax2, bx2), ops.minimum(ax1, bx1)),
                   ops.sub(ops.maximum(ay2, by2), ops.minimum(ay1, by1)))
    return ops.sub(ops.div(inter, union), ops.div(ops.sub(hull, union), hull))


# -- rotated BEV / 3D -------------------------------------------------------------

def bev_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise ground-plane corners as (x, z) pairs."""
    l, w, _ = box.dims
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, s], [-s, c]])
    return local @ rot.T + np.array([box.center[0], box.center[2]])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cross(o, a, p) -> float:
    return (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` against convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        c1, c2 = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        s = inp[-1]
        s_side = _cross(c1, c2, s)
        for e in inp:
            e_side = _cross(c1, c2, e)
            if e_side >= -_CROSS_EPS:
                if s_side < -_CROSS_EPS:
                    out.append(_intersect(s, e, s_side, e_side))
                out.append(e)
            elif s_side >= -_CROSS_EPS:
                out.append(_intersect(s, e, s_side, e_side))
            s, s_side = e, e_side
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(s, e, s_side, e_side):
    t = s_side / (s_side - e_side)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def _box_key(box: Box3D) -> tuple:
    return (*box.center, *box.dims, box.yaw)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # Fixed operand order so that swapping arguments is bit-exact symmetric.
    if _box_key(b) < _box_key(a):
        a, b = b, a
    return polygon_area(clip_convex(bev_corners(a), bev_corners(b)))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    return inter / (area_a + area_b - inter)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    top = max(a.center[1] - a.dims[2] / 2, b.center[1] - b.dims[2] / 2)
    bottom = min(a.center[1] + a.dims[2] / 2, b.center[1] + b.dims[2] / 2)
    return max(0.0, bottom - top)


def iou_3d(a: Box3D, b: Box3D) -> float:
    h = vertical_overlap(a, b)
    if h == 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * h
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    return inter / (vol_a + vol_b - inter)


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi
