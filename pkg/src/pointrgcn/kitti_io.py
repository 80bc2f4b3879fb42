"""Readers and writers for KITTI files and the proposal / feature interchange formats.

Proposal files hold one proposal per line::

    frame_id x y z h w l theta score [feature_file]

with a geometric-centre box in rectified camera coordinates. ``feature_file``
names a sidecar of per-point RPN features for the frame's scan: an 8-byte
header (``u32 N``, ``u32 C``) followed by ``N * C`` little-endian float32
values, row major.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Box7, PointCloud, wrap_angle


DONTCARE_DIM = 1e-3


class MalformedInputError(ValueError):
    """Raised for any file content that does not follow its format."""


@dataclass
class CalibMatrices:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    @classmethod
    def identity(cls) -> "CalibMatrices":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


@dataclass
class LabeledObject:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    box: Box7
    score: float | None = None


@dataclass
class Proposal:
    frame_id: str
    box: Box7
    score: float
    feature_file: str | None = None


@dataclass
class ProposalSet:
    proposals: list[Proposal] = field(default_factory=list)

    def by_frame(self) -> dict[str, list[Proposal]]:
        out: dict[str, list[Proposal]] = {}
        for p in self.proposals:
            out.setdefault(p.frame_id, []).append(p)
        return out

    def __len__(self) -> int:
        return len(self.proposals)


# ---------------------------------------------------------------- velodyne scans

def parse_velodyne(data: bytes) -> PointCloud:
    """Decode a KITTI scan: little-endian float32 ``(x, y, z, reflectance)`` records."""
    if len(data) % 16:
        raise MalformedInputError(f"velodyne scan of {len(data)} bytes is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(arr[:, :3], arr[:, 3:4])


def serialize_velodyne(cloud: PointCloud) -> bytes:
    refl = cloud.feats[:, :1] if cloud.feats is not None else np.zeros((len(cloud), 1))
    return np.hstack([cloud.coords, refl]).astype("<f4").tobytes()


def read_velodyne(path) -> PointCloud:
    return parse_velodyne(Path(path).read_bytes())


# ---------------------------------------------------------------- labels

def _fmt(v: float) -> str:
    return f"{v:.7f}".rstrip("0").rstrip(".") if v != 0 else "0"


def parse_label_line(text: str, line_no: int = 1) -> LabeledObject:
    fields = text.split()
    if len(fields) not in (15, 16):
        raise MalformedInputError(f"line {line_no}: expected 15 or 16 fields, got {len(fields)}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise MalformedInputError(f"line {line_no}: {exc}") from None
    trunc, occ, alpha = nums[0], nums[1], nums[2]
    left, top, right, bottom = nums[3:7]
    h, w, l, x, y, z, ry = nums[7:14]
    if not float(occ).is_integer():
        raise MalformedInputError(f"line {line_no}: occlusion must be an integer, got {fields[2]}")
    if fields[0] == "DontCare":
        # DontCare regions carry -1 placeholder dimensions
        h, w, l = (v if v > 0 else DONTCARE_DIM for v in (h, w, l))
    try:
        box = Box7(x, y - h / 2, z, h, w, l, ry)
    except ValueError as exc:
        raise MalformedInputError(f"line {line_no}: {exc}") from None
    return LabeledObject(
        class_name=fields[0],
        truncation=trunc,
        occlusion=int(occ),
        alpha=alpha,
        bbox2d=(left, top, right, bottom),
        box=box,
        score=nums[14] if len(nums) == 15 else None,
    )


def parse_labels(text: str) -> list[LabeledObject]:
    return [
        parse_label_line(line, i)
        for i, line in enumerate(text.splitlines(), start=1)
        if line.strip()
    ]


def read_labels(path) -> list[LabeledObject]:
    return parse_labels(Path(path).read_text())


def format_label(obj: LabeledObject) -> str:
    b = obj.box
    vals = [
        obj.class_name,
        _fmt(obj.truncation),
        str(int(obj.occlusion)),
        _fmt(obj.alpha),
        *(_fmt(v) for v in obj.bbox2d),
        _fmt(b.h), _fmt(b.w), _fmt(b.l),
        _fmt(b.x), _fmt(b.y + b.h / 2), _fmt(b.z),
        _fmt(b.theta),
    ]
    if obj.score is not None:
        vals.append(_fmt(obj.score))
    return " ".join(vals)


def observation_angle(box: Box7) -> float:
    """KITTI ``alpha`` for a box: ``theta - atan2(x, z)`` wrapped."""
    return wrap_angle(box.theta - math.atan2(box.x, box.z))


def write_detections(objects) -> str:
    """Serialise detections as 16-field KITTI label lines.

    ``objects`` may be :class:`LabeledObject` values or ``(Box7, score)`` pairs;
    pairs are written as ``Car`` with alpha recomputed from the box.
    """
    lines = []
    for obj in objects:
        if not isinstance(obj, LabeledObject):
            box, score = obj
            obj = LabeledObject("Car", 0.0, 0, observation_angle(box), (0.0, 0.0, 0.0, 0.0), box, float(score))
        elif obj.score is None:
            obj = LabeledObject(obj.class_name, obj.truncation, obj.occlusion, obj.alpha, obj.bbox2d, obj.box, 1.0)
        lines.append(format_label(obj))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------- calibration

_CALIB_SHAPES = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def parse_calib(text: str) -> CalibMatrices:
    entries: dict[str, list[float]] = {}
    where: dict[str, int] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = [float(v) for v in rest.split()]
            where[key.strip()] = i
        except ValueError as exc:
            raise MalformedInputError(f"line {i}: {exc}") from None
    mats = {}
    for key, shape in _CALIB_SHAPES.items():
        if key not in entries:
            raise MalformedInputError(f"calibration is missing key {key + ':'!r}")
        vals = entries[key]
        if len(vals) != shape[0] * shape[1]:
            raise MalformedInputError(f"line {where[key]}: calibration key {key} has {len(vals)} values, expected {shape[0] * shape[1]}")
        mats[key] = np.array(vals).reshape(shape)
    return CalibMatrices(**mats)


def format_calib(calib: CalibMatrices) -> str:
    lines = []
    for key in ("P0", "P1", "P2", "P3"):
        lines.append(f"{key}: " + " ".join(f"{v:.12e}" for v in calib.P2.ravel()))
    lines.append("R0_rect: " + " ".join(f"{v:.12e}" for v in calib.R0_rect.ravel()))
    lines.append("Tr_velo_to_cam: " + " ".join(f"{v:.12e}" for v in calib.Tr_velo_to_cam.ravel()))
    lines.append("Tr_imu_to_velo: " + " ".join(f"{v:.12e}" for v in np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()))
    return "\n".join(lines) + "\n"


def read_calib(path) -> CalibMatrices:
    return parse_calib(Path(path).read_text())


def lidar_to_rect(cloud: PointCloud, calib: CalibMatrices) -> PointCloud:
    """``p_rect = R0_rect @ (Tr_velo_to_cam @ [p; 1])``; features pass through."""
    cam = cloud.coords @ calib.Tr_velo_to_cam[:, :3].T + calib.Tr_velo_to_cam[:, 3]
    return PointCloud(cam @ calib.R0_rect.T, cloud.feats)


def rect_to_lidar(cloud: PointCloud, calib: CalibMatrices) -> PointCloud:
    cam = np.linalg.solve(calib.R0_rect, cloud.coords.T).T
    rot, t = calib.Tr_velo_to_cam[:, :3], calib.Tr_velo_to_cam[:, 3]
    velo = np.linalg.solve(rot, (cam - t).T).T
    return PointCloud(velo, cloud.feats)


# ---------------------------------------------------------------- proposals and features

def read_proposals(text: str) -> ProposalSet:
    props = []
    for i, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (9, 10):
            raise MalformedInputError(f"line {i}: expected 9 or 10 proposal fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields[1:9]]
            box = Box7(*vals[:7])
        except ValueError as exc:
            raise MalformedInputError(f"line {i}: {exc}") from None
        props.append(Proposal(fields[0], box, vals[7], fields[9] if len(fields) == 10 else None))
    return ProposalSet(props)


def write_proposals(proposals) -> str:
    lines = []
    for p in proposals:
        b = p.box
        vals = [p.frame_id] + [f"{v:.9f}" for v in (b.x, b.y, b.z, b.h, b.w, b.l, b.theta, p.score)]
        if p.feature_file:
            vals.append(p.feature_file)
        lines.append(" ".join(vals))
    return "".join(line + "\n" for line in lines)


def parse_feature_blob(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise MalformedInputError(f"feature file of {len(data)} bytes is shorter than its 8-byte header")
    n, c = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * n * c:
        raise MalformedInputError(
            f"feature file header declares {n}x{c} values but carries {len(data) - 8} payload bytes"
        )
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(n, c).astype(np.float64)


def serialize_feature_blob(feats: np.ndarray) -> bytes:
    feats = np.asarray(feats)
    n, c = feats.shape
    return struct.pack("<II", n, c) + feats.astype("<f4").tobytes()
