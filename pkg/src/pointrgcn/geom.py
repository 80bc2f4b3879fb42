"""Oriented 3D box geometry in KITTI rectified camera coordinates.

The vertical axis is ``y`` (pointing down) and yaw ``theta`` rotates about it.
A box's length ``l`` runs along its local x axis, width ``w`` along local z and
height ``h`` along y. Box centres are geometric centres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels

BOX_FIELDS = ("x", "y", "z", "h", "w", "l", "theta")


def wrap_angle(theta):
    """Wrap angles into ``(-pi, pi]`` (works on scalars and arrays)."""
    a = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    a = np.where(a <= -np.pi, a + 2 * np.pi, a)
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class Box7:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    theta: float

    def __post_init__(self):
        for name in ("h", "w", "l"):
            if not getattr(self, name) > 0:
                raise ValueError(f"box dimension {name} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.h, self.w, self.l])

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.theta])

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box7":
        return cls(*(float(v) for v in arr[:7]))

    @property
    def volume(self) -> float:
        return self.h * self.w * self.l


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.feats is not None:
            self.feats = np.asarray(self.feats, dtype=np.float64)
            if self.feats.ndim == 1:
                self.feats = self.feats[:, None]
            if len(self.feats) != len(self.coords):
                raise ValueError(
                    f"feature rows ({len(self.feats)}) must match point count ({len(self.coords)})"
                )

    def __len__(self) -> int:
        return len(self.coords)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.coords[idx], None if self.feats is None else self.feats[idx])


def as_box_array(boxes) -> np.ndarray:
    """Stack Box7 values (or rows) into an ``(n, 7)`` array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 7).astype(np.float64)
    rows = [b.to_array() if isinstance(b, Box7) else np.asarray(b, dtype=np.float64) for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def canonicalize(points, box: Box7):
    """Map points into the box frame: ``R(-theta) @ (p - center)``.

    Accepts a :class:`PointCloud` (features carried through) or an ``(N, 3)`` array.
    """
    coords = points.coords if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    local = (coords.reshape(-1, 3) - box.center) @ rot_y(-box.theta).T
    if isinstance(points, PointCloud):
        return PointCloud(local, points.feats)
    return local


def decanonicalize(local: np.ndarray, box: Box7) -> np.ndarray:
    return np.asarray(local, dtype=np.float64).reshape(-1, 3) @ rot_y(box.theta).T + box.center


def canonicalize_box(box: Box7, frame: Box7) -> Box7:
    """Express ``box`` in the canonical frame of ``frame``."""
    c = canonicalize(box.center[None], frame)[0]
    return Box7(c[0], c[1], c[2], box.h, box.w, box.l, box.theta - frame.theta)


def decanonicalize_box(box: Box7, frame: Box7) -> Box7:
    c = decanonicalize(box.center[None], frame)[0]
    return Box7(c[0], c[1], c[2], box.h, box.w, box.l, box.theta + frame.theta)


def box_corners(box: Box7) -> np.ndarray:
    """The 8 corners, bottom face (larger y) first."""
    l2, h2, w2 = box.l / 2, box.h / 2, box.w / 2
    xs = np.array([l2, l2, -l2, -l2, l2, l2, -l2, -l2])
    ys = np.array([h2, h2, h2, h2, -h2, -h2, -h2, -h2])
    zs = np.array([w2, -w2, -w2, w2, w2, -w2, -w2, w2])
    return decanonicalize(np.stack([xs, ys, zs], axis=1), box)


def bev_corners(boxes) -> np.ndarray:
    """Ground-plane rectangles as ``(n, 4, 2)`` counter-clockwise (x, z) quads."""
    b = as_box_array(boxes)
    x, z, w, l, t = b[:, 0], b[:, 2], b[:, 4], b[:, 5], b[:, 6]
    c, s = np.cos(t), np.sin(t)
    loc_a = np.array([0.5, -0.5, -0.5, 0.5])[None] * l[:, None]
    loc_b = np.array([0.5, 0.5, -0.5, -0.5])[None] * w[:, None]
    cx = x[:, None] + c[:, None] * loc_a + s[:, None] * loc_b
    cz = z[:, None] - s[:, None] * loc_a + c[:, None] * loc_b
    return np.stack([cx, cz], axis=-1)


def points_in_box(cloud, box: Box7, margin: float = 0.0) -> np.ndarray:
    """Indices of points inside ``box`` grown by ``margin`` on every face, in input order."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    local = canonicalize(coords, box)
    half = np.array([box.l / 2, box.h / 2, box.w / 2]) + margin
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.flatnonzero(inside)


def bev_intersection_matrix(a, b) -> np.ndarray:
    return kernels.quad_intersection_matrix(bev_corners(a), bev_corners(b))


def iou_bev_matrix(a, b) -> np.ndarray:
    """Pairwise rotated BEV IoU between two box sets."""
    A, B = as_box_array(a), as_box_array(b)
    inter = bev_intersection_matrix(A, B)
    area_a = A[:, 4] * A[:, 5]
    area_b = B[:, 4] * B[:, 5]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou_3d_matrix(a, b) -> np.ndarray:
    """Pairwise 3D IoU: BEV intersection times vertical overlap over union volume."""
    A, B = as_box_array(a), as_box_array(b)
    inter_bev = bev_intersection_matrix(A, B)
    top = np.maximum(A[:, None, 1] - A[:, None, 3] / 2, B[None, :, 1] - B[None, :, 3] / 2)
    bot = np.minimum(A[:, None, 1] + A[:, None, 3] / 2, B[None, :, 1] + B[None, :, 3] / 2)
    inter = inter_bev * np.maximum(bot - top, 0.0)
    vol_a = A[:, 3] * A[:, 4] * A[:, 5]
    vol_b = B[:, 3] * B[:, 4] * B[:, 5]
    union = vol_a[:, None] + vol_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def iou_bev(a: Box7, b: Box7) -> float:
    return float(iou_bev_matrix([a], [b])[0, 0])


def iou_3d(a: Box7, b: Box7) -> float:
    return float(iou_3d_matrix([a], [b])[0, 0])


def iou_matrix(a, b, mode: str = "3d") -> np.ndarray:
    if mode == "3d":
        return iou_3d_matrix(a, b)
    if mode == "bev":
        return iou_bev_matrix(a, b)
    raise ValueError(f"unknown IoU mode {mode!r} (expected '3d' or 'bev')")


def nms(boxes, scores: Iterable[float], iou_threshold: float, mode: str = "bev") -> list[int]:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores keep the lower
    input index first. A box is suppressed when its IoU with an already kept box
    reaches ``iou_threshold``.
    """
    B = as_box_array(boxes)
    s = np.asarray(list(scores), dtype=np.float64)
    if len(B) != len(s):
        raise ValueError(f"{len(B)} boxes but {len(s)} scores")
    if len(B) == 0:
        return []
    order = np.argsort(-s, kind="stable")
    ious = iou_matrix(B, B, mode)
    suppressed = np.zeros(len(B), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] >= iou_threshold
    return keep
