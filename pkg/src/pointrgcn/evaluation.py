"""KITTI-style average precision for 3D and BEV vehicle detection."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geom import as_box_array, iou_3d_matrix, iou_bev_matrix
from .kitti_io import LabeledObject

DIFFICULTIES = ("easy", "moderate", "hard")
# (min 2D box height px, max occlusion, max truncation)
DIFFICULTY_LIMITS = {"easy": (40, 0, 0.15), "moderate": (25, 1, 0.30), "hard": (25, 2, 0.50)}
NEIGHBOR_CLASSES = {"Car": ("Van",)}
METRICS: dict[str, Callable] = {"3d": iou_3d_matrix, "bev": iou_bev_matrix}


def difficulty_of(obj: LabeledObject, override: str | None = None) -> str | None:
    """Easiest KITTI difficulty the object qualifies for, or ``None``."""
    if override is not None:
        return override
    left, top, right, bottom = obj.bbox2d
    height = bottom - top
    for level in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[level]
        if height >= min_h and obj.occlusion <= max_occ and obj.truncation <= max_trunc:
            return level
    return None


def recall_positions(recall_points: int) -> np.ndarray:
    if recall_points == 11:
        return np.linspace(0.0, 1.0, 11)
    if recall_points == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError(f"recall_points must be 11 or 40, got {recall_points}")


@dataclass
class FrameDetections:
    boxes: np.ndarray  # (n, 7)
    scores: np.ndarray  # (n,)


@dataclass
class FrameGroundTruth:
    boxes: np.ndarray  # (m, 7)
    ignore: np.ndarray  # (m,) bool: matched detections are neither TP nor FP


@dataclass
class APEntry:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int
    undefined: bool = False


def match_detections(dets: list[FrameDetections], gts: list[FrameGroundTruth], iou_fn, iou_threshold: float):
    """Greedy score-ordered matching across frames.

    Returns ``(scores, is_tp)`` for the non-ignored detections in descending
    score order, and the number of non-ignored ground truths.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection frames but {len(gts)} ground-truth frames")
    entries = []
    for f, d in enumerate(dets):
        for i, s in enumerate(np.asarray(d.scores, dtype=np.float64)):
            entries.append((-s, f, i))
    entries.sort()
    ious = [
        iou_fn(as_box_array(d.boxes), as_box_array(g.boxes)) if len(d.boxes) and len(g.boxes) else None
        for d, g in zip(dets, gts)
    ]
    taken = [np.zeros(len(g.boxes), dtype=bool) for g in gts]
    scores, tp = [], []
    for neg_s, f, i in entries:
        m = ious[f]
        best = -1
        if m is not None:
            cand = np.where(taken[f], -1.0, m[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                best = j
        if best >= 0:
            taken[f][best] = True
            if gts[f].ignore[best]:
                continue
            tp.append(True)
        else:
            tp.append(False)
        scores.append(-neg_s)
    n_gt = int(sum((~np.asarray(g.ignore, dtype=bool)).sum() for g in gts))
    return np.array(scores), np.array(tp, dtype=bool), n_gt


def compute_ap(dets, gts, iou_fn=iou_3d_matrix, iou_threshold: float = 0.7, recall_points: int = 40) -> APEntry:
    """Interpolated AP (x100) at 11 or 40 recall positions."""
    if isinstance(iou_fn, str):
        iou_fn = METRICS[iou_fn]
    scores, tp, n_gt = match_detections(dets, gts, iou_fn, iou_threshold)
    positions = recall_positions(recall_points)
    if n_gt == 0:
        return APEntry(0.0, np.zeros(len(positions)), positions, 0, undefined=True)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    interp = np.zeros(len(positions))
    for j, r in enumerate(positions):
        ok = recall >= r - 1e-12
        if ok.any():
            interp[j] = precision[ok].max()
    return APEntry(100.0 * float(interp.mean()), interp, positions, n_gt)


@dataclass
class APReport:
    iou_threshold: float
    entries: dict[tuple[str, str, int], APEntry] = field(default_factory=dict)

    def ap(self, metric: str, difficulty: str, recall_points: int = 40) -> float:
        return self.entries[(metric, difficulty, recall_points)].ap

    def to_text(self) -> str:
        lines = [f"Car AP @ IoU {self.iou_threshold}"]
        for (metric, diff, rp), e in sorted(self.entries.items(), key=_entry_order):
            flag = "  (no ground truth)" if e.undefined else ""
            lines.append(f"{metric.upper():>3} R{rp:<2} {diff:<8} {e.ap:7.2f}{flag}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "difficulty", "recall_points", "ap"])
        for (metric, diff, rp), e in sorted(self.entries.items(), key=_entry_order):
            w.writerow([metric, diff, rp, f"{e.ap:.6f}"])
        return buf.getvalue()


def _entry_order(item):
    (metric, diff, rp), _ = item
    return metric, DIFFICULTIES.index(diff), rp


def split_labels(
    det_objs: list[LabeledObject],
    gt_objs: list[LabeledObject],
    difficulty: str,
    class_name: str = "Car",
    difficulty_override: str | None = None,
) -> tuple[FrameDetections, FrameGroundTruth]:
    """Filter one frame's labels for (class, difficulty) evaluation."""
    rank = DIFFICULTIES.index(difficulty)
    neighbors = NEIGHBOR_CLASSES.get(class_name, ())
    g_boxes, g_ignore = [], []
    for obj in gt_objs:
        if obj.class_name == class_name:
            level = difficulty_of(obj, difficulty_override)
            valid = level is not None and DIFFICULTIES.index(level) <= rank
        elif obj.class_name in neighbors or obj.class_name == "DontCare":
            valid = False
        else:
            continue
        g_boxes.append(obj.box.to_array())
        g_ignore.append(not valid)
    d = [o for o in det_objs if o.class_name == class_name]
    dets = FrameDetections(
        as_box_array([o.box for o in d]), np.array([1.0 if o.score is None else o.score for o in d])
    )
    return dets, FrameGroundTruth(as_box_array(g_boxes), np.array(g_ignore, dtype=bool))


def evaluate(
    det_frames: list[list[LabeledObject]],
    gt_frames: list[list[LabeledObject]],
    metrics=("3d", "bev"),
    recall_points=(11, 40),
    iou_threshold: float = 0.7,
    class_name: str = "Car",
    difficulty_override: str | None = None,
) -> APReport:
    report = APReport(iou_threshold)
    for diff in DIFFICULTIES:
        pairs = [split_labels(d, g, diff, class_name, difficulty_override) for d, g in zip(det_frames, gt_frames)]
        dets = [p[0] for p in pairs]
        gts = [p[1] for p in pairs]
        for metric in metrics:
            for rp in recall_points:
                report.entries[(metric, diff, rp)] = compute_ap(dets, gts, METRICS[metric], iou_threshold, rp)
    return report
