"""Dataset I/O, training and refinement built on the model modules.

A dataset directory follows the KITTI object layout plus two extra folders::

    velodyne/<id>.bin      LiDAR scans
    calib/<id>.txt         calibration
    label_2/<id>.txt       ground truth labels
    proposals/<id>.txt     proposal interchange file
    rpn_features/<id>.bin  optional per-point feature sidecar
"""
from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kitti_io
from .cgcn import PointRGCN
from .codec import BoxCoder, TargetBatch, assign_roles, build_targets, decode, total_loss
from .config import ConfigError, RunConfig
from .geom import Box7, PointCloud, nms, rot_y
from .kitti_io import CalibMatrices, LabeledObject, Proposal
from .nn import Adam, backward, no_grad
from .nn.autograd import sigmoid_np
from .nn.checkpoint import load_into, read_checkpoint, save_checkpoint
from .rgcn import ProposalInput, prepare_proposal_input
from .rng import SplitMix64, derive_seed
from .synth import Frame, gen_frame

log = logging.getLogger(__name__)

SUBDIRS = ("velodyne", "calib", "label_2", "proposals", "rpn_features")
# camera (x right, y down, z forward) from LiDAR (x forward, y left, z up)
VELO_TO_CAM = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
SYNTH_BBOX2D = (0.0, 0.0, 100.0, 100.0)


def synth_calib() -> CalibMatrices:
    p2 = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CalibMatrices(p2, np.eye(3), VELO_TO_CAM.copy())


# ---------------------------------------------------------------- dataset on disk

def frame_ids(root) -> list[str]:
    root = Path(root)
    vel = root / "velodyne"
    if not vel.is_dir():
        raise FileNotFoundError(f"{root}: no velodyne/ directory")
    return sorted(p.stem for p in vel.glob("*.bin"))


def write_frame(root, frame: Frame, calib: CalibMatrices | None = None) -> None:
    root = Path(root)
    calib = calib or synth_calib()
    fid = frame.frame_id
    velo = kitti_io.rect_to_lidar(frame.cloud, calib)
    (root / "velodyne" / f"{fid}.bin").write_bytes(kitti_io.serialize_velodyne(velo))
    (root / "calib" / f"{fid}.txt").write_text(kitti_io.format_calib(calib))
    labels = [
        LabeledObject("Car", 0.0, 0, kitti_io.observation_angle(b), SYNTH_BBOX2D, b) for b in frame.gts
    ]
    (root / "label_2" / f"{fid}.txt").write_text("".join(kitti_io.format_label(o) + "\n" for o in labels))
    feat_ref = None
    if frame.rpn_feats is not None:
        feat_ref = f"rpn_features/{fid}.bin"
        (root / feat_ref).write_bytes(kitti_io.serialize_feature_blob(frame.rpn_feats))
    props = [Proposal(fid, b, s, feat_ref) for b, s in zip(frame.proposals, frame.proposal_scores)]
    (root / "proposals" / f"{fid}.txt").write_text(kitti_io.write_proposals(props))


def synthesize_dataset(root, cfg: RunConfig, n_frames: int) -> list[str]:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    channels = cfg.c_rpn if cfg.synth_rpn_feats else 0
    for i in range(n_frames):
        fid = f"{i:06d}"
        frame = gen_frame(cfg.scene_spec(derive_seed(cfg.seed, i)), fid, channels)
        write_frame(root, frame)
        ids.append(fid)
    return ids


def load_frame(root, fid: str, class_name: str = "Car") -> Frame:
    root = Path(root)
    calib = kitti_io.read_calib(root / "calib" / f"{fid}.txt")
    cloud = kitti_io.lidar_to_rect(kitti_io.read_velodyne(root / "velodyne" / f"{fid}.bin"), calib)
    label_path = root / "label_2" / f"{fid}.txt"
    gts = []
    if label_path.exists():
        gts = [o.box for o in kitti_io.read_labels(label_path) if o.class_name == class_name]
    prop_path = root / "proposals" / f"{fid}.txt"
    props = kitti_io.read_proposals(prop_path.read_text()).proposals if prop_path.exists() else []
    rpn = None
    refs = {p.feature_file for p in props if p.feature_file}
    if refs:
        if len(refs) > 1:
            raise kitti_io.MalformedInputError(f"{prop_path}: proposals reference several feature files {sorted(refs)}")
        rpn = kitti_io.parse_feature_blob((root / refs.pop()).read_bytes())
        if len(rpn) != len(cloud):
            raise kitti_io.MalformedInputError(
                f"{fid}: feature file has {len(rpn)} rows but the scan has {len(cloud)} points"
            )
    return Frame(fid, cloud, gts, [p.box for p in props], [p.score for p in props], rpn)


def load_dataset(root) -> list[Frame]:
    return [load_frame(root, fid) for fid in frame_ids(root)]


# ---------------------------------------------------------------- model construction

def build_model(cfg: RunConfig) -> PointRGCN:
    return PointRGCN(cfg.model_config(), seed=derive_seed(cfg.seed, 7))


def save_model(path, model: PointRGCN, cfg: RunConfig) -> None:
    save_checkpoint(path, model.parameters(), cfg.to_text())


def load_model(path, cfg: RunConfig | None = None) -> tuple[PointRGCN, RunConfig]:
    arrays, meta = read_checkpoint(path)
    if cfg is None:
        cfg = RunConfig.from_text(meta) if meta else RunConfig()
    model = build_model(cfg)
    load_into(model.parameters(), arrays)
    return model, cfg


def check_dataset(frames: list[Frame], cfg: RunConfig) -> None:
    if not frames:
        raise ConfigError("dataset has no frames")
    if cfg.use_rpn_feats:
        for f in frames:
            if f.rpn_feats is None:
                raise ConfigError(f"frame {f.frame_id} has no RPN features but use_rpn_feats = true")
            if f.rpn_feats.shape[1] != cfg.c_rpn:
                raise ConfigError(
                    f"frame {f.frame_id} has {f.rpn_feats.shape[1]} RPN channels but c_rpn = {cfg.c_rpn}"
                )


# ---------------------------------------------------------------- training

def augment_frame(frame: Frame, rng: SplitMix64, yaw_max: float, shift_max: float) -> Frame:
    """Global rotation about the vertical axis plus a translation, applied to everything."""
    u = rng.uniform(4)
    yaw = (2 * u[0] - 1) * yaw_max
    shift = np.array([(2 * u[1] - 1) * shift_max, (2 * u[2] - 1) * shift_max * 0.1, (2 * u[3] - 1) * shift_max])
    R = rot_y(yaw)

    def move(b: Box7) -> Box7:
        c = R @ b.center + shift
        return Box7(c[0], c[1], c[2], b.h, b.w, b.l, b.theta + yaw)

    cloud = PointCloud(frame.cloud.coords @ R.T + shift, frame.cloud.feats)
    return Frame(
        frame.frame_id, cloud, [move(b) for b in frame.gts], [move(b) for b in frame.proposals],
        frame.proposal_scores, frame.rpn_feats,
    )


def cap_proposals(frame: Frame, cap: int) -> list[int]:
    order = np.argsort(-np.asarray(frame.proposal_scores, dtype=np.float64), kind="stable")
    return [int(i) for i in order[:cap]]


def sample_loss_subset(cls: np.ndarray, subset: int, rng: SplitMix64, balance: bool = True) -> np.ndarray:
    """Pick ``subset`` proposals, half positives when possible."""
    n = len(cls)
    if n <= subset:
        return np.arange(n)
    if not balance:
        return np.sort(rng.choice(n, subset))
    pos = np.flatnonzero(cls == 1)
    rest = np.flatnonzero(cls != 1)
    n_pos = min(len(pos), subset // 2)
    take_pos = pos[rng.choice(len(pos), n_pos)] if n_pos else np.zeros(0, np.int64)
    n_rest = min(len(rest), subset - n_pos)
    take_rest = rest[rng.choice(len(rest), n_rest)] if n_rest else np.zeros(0, np.int64)
    chosen = np.concatenate([take_pos, take_rest])
    if len(chosen) < subset:
        left = np.setdiff1d(pos, take_pos)
        chosen = np.concatenate([chosen, left[: subset - len(chosen)]])
    return np.sort(chosen)


def sampling_seed(seed: int, frame_id: str, proposal_index: int, epoch: int = 0) -> int:
    """Point-sampling seed of one proposal. Epoch 0 is shared with refinement."""
    return derive_seed(seed, 12, zlib.crc32(frame_id.encode()), proposal_index, epoch)


@dataclass
class TrainItem:
    frame_index: int
    inputs: list[ProposalInput]
    targets: TargetBatch


def prepare_training_frame(frame: Frame, fi: int, cfg: RunConfig, coder: BoxCoder, epoch: int) -> TrainItem:
    rng = SplitMix64(derive_seed(cfg.seed, 11, epoch, fi))
    if cfg.augment:
        frame = augment_frame(frame, rng, cfg.aug_yaw, cfg.aug_translation)
    keep = cap_proposals(frame, cfg.proposals_per_frame)
    props = [frame.proposals[i] for i in keep]
    roles = assign_roles(props, frame.gts, cfg.iou_mode, cfg.pos_iou, cfg.neg_iou, cfg.reg_iou)
    pick = sample_loss_subset(roles.cls, cfg.loss_subset, rng, cfg.balance_subset)
    props = [props[i] for i in pick]
    source = [keep[i] for i in pick]
    roles.iou, roles.gt_index = roles.iou[pick], roles.gt_index[pick]
    roles.cls, roles.reg_mask = roles.cls[pick], roles.reg_mask[pick]
    targets = build_targets(props, frame.gts, roles, coder)
    sample_epoch = epoch if cfg.resample_points else 0
    rc = cfg.model_config().rgcn
    rpn = frame.rpn_feats if cfg.use_rpn_feats else None
    inputs = [
        prepare_proposal_input(frame.cloud, rpn, p, rc, sampling_seed(cfg.seed, frame.frame_id, j, sample_epoch))
        for j, p in zip(source, props)
    ]
    return TrainItem(fi, inputs, targets)


def _concat_targets(items: list[TrainItem]) -> TargetBatch:
    return TargetBatch(
        np.concatenate([it.targets.cls for it in items]),
        np.concatenate([it.targets.reg_mask for it in items]),
        np.concatenate([it.targets.onehot for it in items]),
        np.concatenate([it.targets.reg for it in items]),
    )


def _slice_targets(t: TargetBatch, lo: int, hi: int) -> TargetBatch:
    return TargetBatch(t.cls[lo:hi], t.reg_mask[lo:hi], t.onehot[lo:hi], t.reg[lo:hi])


def train_step(model: PointRGCN, items: list[TrainItem], cfg: RunConfig, coder: BoxCoder, opt: Adam) -> dict:
    """One optimiser step over a batch of frames (gradients accumulated over chunks)."""
    items = [it for it in items if len(it.inputs)]
    if not items:
        return {}
    batch_targets = _concat_targets(items)
    norms = batch_targets.normalizers()
    opt.zero_grad()
    comps = {"cls": 0.0, "bin": 0.0, "reg": 0.0, "total": 0.0}

    def run(inputs, targets, sizes):
        out = model(inputs, sizes)
        loss = None
        for head in out.heads:
            l, c = total_loss(head.cls, head.reg, targets, coder, norms)
            loss = l if loss is None else loss + l
            for key in comps:
                comps[key] += c[key]
        if loss is not None and loss.requires_grad:
            backward(loss)

    if model.cgcn is not None:
        for it in items:
            run(it.inputs, it.targets, [len(it.inputs)])
    else:
        inputs = [p for it in items for p in it.inputs]
        step = max(1, cfg.forward_chunk)
        for lo in range(0, len(inputs), step):
            hi = min(lo + step, len(inputs))
            run(inputs[lo:hi], _slice_targets(batch_targets, lo, hi), None)
    opt.step()
    return comps


def train(
    cfg: RunConfig,
    frames: list[Frame],
    model: PointRGCN | None = None,
    loss_log=None,
    epochs: int | None = None,
    on_epoch=None,
) -> tuple[PointRGCN, list[dict]]:
    """Train on in-memory frames; returns the model and per-epoch mean losses.

    ``on_epoch(epoch, model, row)`` is called after every epoch; returning True stops training.
    """
    check_dataset(frames, cfg)
    model = model or build_model(cfg)
    coder = cfg.coder()
    opt = Adam(model.parameters(), cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    history = []
    writer = None
    if loss_log is not None:
        writer = csv.writer(loss_log, lineterminator="\n")
        writer.writerow(["epoch", "loss", "cls", "bin", "reg", "seconds"])
    n_epochs = epochs if epochs is not None else cfg.epochs
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.epoch_lr(epoch, n_epochs)
        order = SplitMix64(derive_seed(cfg.seed, 13, epoch)).permutation(len(frames))
        totals = {"cls": 0.0, "bin": 0.0, "reg": 0.0, "total": 0.0}
        n_steps = 0
        batch, count = [], 0
        for fi in order:
            item = prepare_training_frame(frames[fi], int(fi), cfg, coder, epoch)
            batch.append(item)
            count += len(item.inputs)
            if count >= cfg.batch_size:
                _accumulate(totals, train_step(model, batch, cfg, coder, opt))
                n_steps += 1
                batch, count = [], 0
        if batch:
            _accumulate(totals, train_step(model, batch, cfg, coder, opt))
            n_steps += 1
        row = {k: v / max(n_steps, 1) for k, v in totals.items()}
        row["epoch"] = epoch
        row["seconds"] = time.perf_counter() - t0
        if not all(math.isfinite(row[k]) for k in totals):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: {row}")
        history.append(row)
        log.info("epoch %d loss %.5f (%.1fs)", epoch, row["total"], row["seconds"])
        if writer is not None:
            writer.writerow([epoch] + [f"{row[k]:.8f}" for k in ("total", "cls", "bin", "reg")] + [f"{row['seconds']:.3f}"])
        if on_epoch is not None and on_epoch(epoch, model, row):
            break
    return model, history


def _accumulate(totals: dict, comps: dict) -> None:
    for k, v in comps.items():
        totals[k] += v


# ---------------------------------------------------------------- refinement

@dataclass
class Detection:
    box: Box7
    score: float
    proposal_index: int


def refine_frame(model: PointRGCN, frame: Frame, cfg: RunConfig, nms_enabled: bool = True, threshold: float | None = None) -> list[Detection]:
    """Decode every proposal, score, threshold and suppress."""
    coder = cfg.coder()
    keep = cap_proposals(frame, cfg.proposals_per_frame)
    props = [frame.proposals[i] for i in keep]
    if not props:
        return []
    rpn = frame.rpn_feats if cfg.use_rpn_feats else None
    rc = cfg.model_config().rgcn
    inputs = [
        prepare_proposal_input(frame.cloud, rpn, p, rc, sampling_seed(cfg.seed, frame.frame_id, j)) for j, p in zip(keep, props)
    ]
    cls, reg = infer(model, inputs, cfg.forward_chunk)
    scores = sigmoid_np(cls)
    scores[[i for i, p in enumerate(inputs) if p.empty]] = 0.0
    boxes = [decode(p, r, coder) for p, r in zip(props, reg)]
    thr = cfg.score_threshold if threshold is None else threshold
    cand = [i for i in range(len(boxes)) if scores[i] >= thr and not inputs[i].empty]
    if nms_enabled and cand:
        kept = nms([boxes[i] for i in cand], [scores[i] for i in cand], cfg.nms_threshold, cfg.nms_mode)
        cand = [cand[i] for i in kept]
    return [Detection(boxes[i], float(scores[i]), keep[i]) for i in cand]


def infer(model: PointRGCN, inputs: list[ProposalInput], chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Final-stage (cls logits, regression) for one frame's proposals, without recording gradients."""
    from .nn.autograd import concat

    with no_grad():
        step = max(1, chunk)
        feats = [model.proposal_features(inputs[lo:lo + step]) for lo in range(0, len(inputs), step)]
        feats = concat(feats, axis=0) if len(feats) > 1 else feats[0]
        if model.cgcn is None:
            head = model.rgcn_heads(feats)
        else:
            if model.cfg.cgcn.rpn_global:
                from .cgcn import _rpn_pool
                from .nn.autograd import Tensor

                feats = concat([feats, Tensor(_rpn_pool(inputs, model.cfg.rgcn.c_rpn))], axis=-1)
            head = model.cgcn_heads(model.cgcn(feats))
    return head.cls.data.reshape(-1).copy(), head.reg.data.copy()


def detections_to_labels(dets: list[Detection]) -> list[LabeledObject]:
    return [
        LabeledObject("Car", 0.0, 0, kitti_io.observation_angle(d.box), SYNTH_BBOX2D, d.box, d.score) for d in dets
    ]
