"""Deterministic synthetic scenes and jittered proposals.

Vehicles are boxes resting on a flat ground plane at ``y = ground_y`` (camera
y points down), placed without BEV overlap, with dimensions drawn within 10% of
the dataset means. Points are sampled uniformly on each vehicle's surface;
clutter points are spread uniformly over the ground.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import MEAN_DIMS
from .geom import Box7, PointCloud, decanonicalize, iou_3d_matrix, iou_bev_matrix, points_in_box
from .rng import SplitMix64, derive_seed

MAX_REJECTIONS = 10_000


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    n_vehicles: int = 3
    ground_extent: float = 30.0
    clutter_points: int = 1000
    surface_points_per_vehicle: int = 300
    # standard deviations for (x, z, theta, h, w, l, y)
    proposal_noise: tuple[float, ...] = (0.3, 0.3, math.radians(10), 0.153, 0.163, 0.388, 0.0)
    proposals_per_gt: int = 4
    ground_y: float = 1.7
    near_z: float = 5.0

    def __post_init__(self):
        counts = (self.n_vehicles, self.clutter_points, self.surface_points_per_vehicle)
        if min(counts) < 0 or self.proposals_per_gt < 1:
            raise ValueError("scene counts must be >= 0 and proposals_per_gt >= 1")
        self.proposal_noise = tuple(float(v) for v in self.proposal_noise)
        if len(self.proposal_noise) != 7 or min(self.proposal_noise) < 0:
            raise ValueError("proposal_noise needs 7 non-negative deviations (x, z, theta, h, w, l, y)")


def _place_vehicles(spec: SceneSpec, rng: SplitMix64) -> list[Box7]:
    boxes: list[Box7] = []
    rejections = 0
    E = spec.ground_extent
    while len(boxes) < spec.n_vehicles:
        u = rng.uniform(6)
        h, w, l = (MEAN_DIMS[f] * (0.9 + 0.2 * u[i]) for i, f in enumerate("hwl"))
        box = Box7(
            -E / 2 + E * u[3],
            spec.ground_y - h / 2,
            spec.near_z + E * u[4],
            h, w, l,
            -math.pi + 2 * math.pi * u[5],
        )
        if boxes and iou_bev_matrix([box], boxes).max() > 0:
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise PlacementError(
                    f"could not place {spec.n_vehicles} vehicles after {MAX_REJECTIONS} rejections; "
                    "use a smaller n_vehicles or a larger ground_extent"
                )
            continue
        boxes.append(box)
    return boxes


def sample_box_surface(box: Box7, n: int, rng: SplitMix64) -> np.ndarray:
    """``n`` points uniform over the box surface (area-weighted face choice)."""
    if n == 0:
        return np.zeros((0, 3))
    l, h, w = box.l, box.h, box.w
    areas = np.array([h * w, h * w, l * w, l * w, l * h, l * h])  # +-x, +-y, +-z faces
    cum = np.cumsum(areas) / areas.sum()
    face = np.minimum(np.searchsorted(cum, rng.uniform(n), side="right"), 5)
    a, b = rng.uniform(n) - 0.5, rng.uniform(n) - 0.5
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    axis = face // 2
    local = np.empty((n, 3))
    local[:, 0] = np.where(axis == 0, sign, a) * l
    local[:, 1] = np.where(axis == 1, sign, np.where(axis == 0, a, b)) * h
    local[:, 2] = np.where(axis == 2, sign, b) * w
    return decanonicalize(local, box)


def gen_scene(spec: SceneSpec) -> tuple[PointCloud, list[Box7]]:
    """Vehicles and a point cloud (reflectance as the single feature channel)."""
    rng = SplitMix64(derive_seed(spec.seed, 0))
    boxes = _place_vehicles(spec, rng)
    parts, refl = [], []
    for box in boxes:
        pts = sample_box_surface(box, spec.surface_points_per_vehicle, rng)
        parts.append(pts)
        refl.append(0.5 + 0.5 * rng.uniform(len(pts)))
    n = spec.clutter_points
    E = spec.ground_extent
    u = rng.uniform(2 * n)
    ground = np.stack([-E / 2 - 2 + (E + 4) * u[:n], np.full(n, spec.ground_y), spec.near_z - 2 + (E + 4) * u[n:]], axis=1)
    parts.append(ground)
    refl.append(0.3 * rng.uniform(n))
    coords = np.concatenate(parts) if parts else np.zeros((0, 3))
    return PointCloud(coords, np.concatenate(refl)[:, None]), boxes


def synthetic_rpn_features(cloud: PointCloud, boxes: list[Box7], channels: int, seed: int) -> np.ndarray:
    """Stand-in per-point RPN features: a noisy foreground score plus noise channels."""
    rng = SplitMix64(derive_seed(seed, 2))
    n = len(cloud)
    feats = rng.normal(n * channels, 0.1).reshape(n, channels)
    fg = np.zeros(n)
    for box in boxes:
        fg[points_in_box(cloud, box, 0.05)] = 1.0
    if channels > 0:
        feats[:, 0] += fg
    if channels > 1:
        feats[:, 1] += 1.0 - fg
    return feats


def perturb_to_proposals(gts: list[Box7], spec: SceneSpec) -> list[tuple[Box7, float]]:
    """Jitter each ground truth ``proposals_per_gt`` times; score is the 3D IoU with its source."""
    rng = SplitMix64(derive_seed(spec.seed, 1))
    sx, sz, st, sh, sw, sl, sy = spec.proposal_noise
    out = []
    for gt in gts:
        for _ in range(spec.proposals_per_gt):
            n = rng.normal(7)
            box = Box7(
                gt.x + sx * n[0],
                gt.y + sy * n[6],
                gt.z + sz * n[1],
                max(gt.h + sh * n[3], 0.1 * gt.h),
                max(gt.w + sw * n[4], 0.1 * gt.w),
                max(gt.l + sl * n[5], 0.1 * gt.l),
                gt.theta + st * n[2],
            )
            out.append((box, float(iou_3d_matrix([box], [gt])[0, 0])))
    return out


@dataclass
class Frame:
    frame_id: str
    cloud: PointCloud
    gts: list[Box7]
    proposals: list[Box7]
    proposal_scores: list[float]
    rpn_feats: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def gen_frame(spec: SceneSpec, frame_id: str, rpn_channels: int = 0) -> Frame:
    cloud, gts = gen_scene(spec)
    props = perturb_to_proposals(gts, spec)
    rpn = synthetic_rpn_features(cloud, gts, rpn_channels, spec.seed) if rpn_channels > 0 else None
    return Frame(frame_id, cloud, gts, [p for p, _ in props], [s for _, s in props], rpn)
