"""Binned / residual box encoding, decoding, proposal roles and the joint loss.

``x``, ``z`` and ``theta`` are binned: a proposal value ``b`` and search range
``S`` split into ``2S / delta`` bins whose centres are ``b + (i + 0.5) delta - S``;
the network scores the bins and regresses an offset (in units of ``delta``)
inside each. ``y`` regresses a raw offset from the proposal, and ``h, w, l``
regress offsets normalised by the dataset mean dimension, which also serves
as the anchor.

By default targets are expressed in the proposal's canonical frame, where the
proposal sits at the origin with zero yaw; set ``canonical=False`` to encode
offsets directly in camera coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box7, canonicalize_box, decanonicalize_box, iou_matrix, wrap_angle
from .nn.autograd import Tensor, bce_with_logits, log_softmax, smooth_l1

MEAN_DIMS = {"h": 1.53, "w": 1.63, "l": 3.88}
BINNED = ("x", "z", "theta")
RESIDUAL = ("y", "h", "w", "l")
_FIELD_INDEX = {"x": 0, "y": 1, "z": 2, "h": 3, "w": 4, "l": 5, "theta": 6}


@dataclass(frozen=True)
class BinSpec:
    feature: str
    search: float  # S_f, zero for residual features
    size: float  # delta_f
    anchor: str  # "proposal" or "mean"

    @property
    def count(self) -> int:
        if self.search == 0:
            return 1
        n = 2 * self.search / self.size
        if abs(n - round(n)) > 1e-9:
            raise ValueError(f"{self.feature}: 2*S={2 * self.search} is not a multiple of delta={self.size}")
        return int(round(n))

    def center(self, ref: float, i) -> float:
        return ref + (np.asarray(i) + 0.5) * self.size - self.search


def default_bin_specs() -> dict[str, BinSpec]:
    return {
        "x": BinSpec("x", 1.5, 0.5, "proposal"),
        "z": BinSpec("z", 1.5, 0.5, "proposal"),
        "theta": BinSpec("theta", math.radians(22.5), math.radians(5.0), "proposal"),
        "y": BinSpec("y", 0.0, 1.0, "proposal"),
        "h": BinSpec("h", 0.0, MEAN_DIMS["h"], "mean"),
        "w": BinSpec("w", 0.0, MEAN_DIMS["w"], "mean"),
        "l": BinSpec("l", 0.0, MEAN_DIMS["l"], "mean"),
    }


@dataclass
class BoxCoder:
    specs: dict[str, BinSpec] = field(default_factory=default_bin_specs)
    canonical: bool = True
    bin_loss: str = "bce"  # or "softmax"

    def __post_init__(self):
        if self.bin_loss not in ("bce", "softmax"):
            raise ValueError(f"bin_loss must be 'bce' or 'softmax', got {self.bin_loss!r}")
        self.layout = reg_layout(self.specs)
        self.reg_width = self.layout["width"]

    @property
    def bins(self) -> dict[str, int]:
        return {f: self.specs[f].count for f in BINNED}


def reg_layout(specs: dict[str, BinSpec]) -> dict:
    """Column slices of the regression vector.

    Order: x bin scores, x offsets, z bin scores, z offsets, theta bin scores,
    theta offsets, then y, h, w, l.
    """
    lay: dict = {}
    off = 0
    for f in BINNED:
        n = specs[f].count
        lay[f + "_cls"] = slice(off, off + n)
        lay[f + "_reg"] = slice(off + n, off + 2 * n)
        off += 2 * n
    for f in RESIDUAL:
        lay[f] = off
        off += 1
    lay["width"] = off
    return lay


@dataclass
class TargetSet:
    cls: int  # 1 positive, 0 negative, -1 ignore
    reg_eligible: bool
    bins: dict[str, int]
    bcls: dict[str, np.ndarray]
    breg: dict[str, float]


def _frame(proposal: Box7, gt: Box7, coder: BoxCoder) -> tuple[np.ndarray, np.ndarray]:
    """(reference values, target values) for x, y, z, theta in the encoding frame."""
    if coder.canonical:
        g = canonicalize_box(gt, proposal)
        ref = np.zeros(4)
        tgt = np.array([g.x, g.y, g.z, g.theta])
    else:
        ref = np.array([proposal.x, proposal.y, proposal.z, proposal.theta])
        tgt = np.array([gt.x, gt.y, gt.z, gt.theta])
    dtheta = wrap_angle(tgt[3] - ref[3])
    if abs(dtheta) > math.pi / 2:
        dtheta = wrap_angle(dtheta + math.pi)
    s = coder.specs["theta"].search
    tgt[3] = ref[3] + min(max(dtheta, -s), s)
    return ref, tgt


def encode_targets(proposal: Box7, gt: Box7, coder: BoxCoder | None = None, cls: int = 1, reg_eligible: bool = True) -> TargetSet:
    coder = coder or BoxCoder()
    ref, tgt = _frame(proposal, gt, coder)
    vals = {"x": (ref[0], tgt[0]), "y": (ref[1], tgt[1]), "z": (ref[2], tgt[2]), "theta": (ref[3], tgt[3])}
    bins, bcls, breg = {}, {}, {}
    for f in BINNED:
        spec = coder.specs[f]
        r, t = vals[f]
        n = spec.count
        b = int(math.floor((t - r + spec.search) / spec.size))
        b = min(max(b, 0), n - 1)
        bins[f] = b
        bcls[f] = np.eye(n)[b]
        breg[f] = (t - spec.center(r, b)) / spec.size
    r, t = vals["y"]
    breg["y"] = (t - r) / coder.specs["y"].size
    for f in ("h", "w", "l"):
        spec = coder.specs[f]
        breg[f] = (getattr(gt, f) - spec.size) / spec.size
    return TargetSet(cls, reg_eligible, bins, bcls, breg)


def decode(proposal: Box7, head, coder: BoxCoder | None = None) -> Box7:
    """Refined box from a 46-wide regression vector (``head`` may also be a HeadOutput)."""
    coder = coder or BoxCoder()
    reg = np.asarray(getattr(head, "reg", head), dtype=np.float64).reshape(-1)
    if reg.shape[0] != coder.reg_width:
        raise ValueError(f"regression vector has width {reg.shape[0]}, expected {coder.reg_width}")
    lay = coder.layout
    if coder.canonical:
        ref = np.zeros(4)
    else:
        ref = np.array([proposal.x, proposal.y, proposal.z, proposal.theta])
    refs = {"x": ref[0], "z": ref[2], "theta": ref[3]}
    out = {}
    for f in BINNED:
        spec = coder.specs[f]
        i = int(np.argmax(reg[lay[f + "_cls"]]))
        out[f] = spec.center(refs[f], i) + spec.size * reg[lay[f + "_reg"]][i]
    out["y"] = ref[1] + coder.specs["y"].size * reg[lay["y"]]
    for f in ("h", "w", "l"):
        spec = coder.specs[f]
        out[f] = max(spec.size + spec.size * reg[lay[f]], 1e-3)
    box = Box7(out["x"], out["y"], out["z"], out["h"], out["w"], out["l"], out["theta"])
    return decanonicalize_box(box, proposal) if coder.canonical else box


def decode_batch(proposals, reg: np.ndarray, coder: BoxCoder | None = None) -> list[Box7]:
    return [decode(p, r, coder) for p, r in zip(proposals, np.asarray(reg))]


def targets_to_vector(target: TargetSet, coder: BoxCoder) -> tuple[np.ndarray, np.ndarray]:
    """(one-hot bin targets laid out like the regression vector, 7 regression targets in x,z,theta,y,h,w,l order)."""
    onehot = np.zeros(coder.reg_width)
    for f in BINNED:
        onehot[coder.layout[f + "_cls"]] = target.bcls[f]
    regs = np.array([target.breg[f] for f in BINNED + RESIDUAL])
    return onehot, regs


# ---------------------------------------------------------------- roles


@dataclass
class Roles:
    iou: np.ndarray
    gt_index: np.ndarray
    cls: np.ndarray  # 1, 0 or -1 (ignore)
    reg_mask: np.ndarray

    @property
    def reg_indices(self) -> np.ndarray:
        return np.flatnonzero(self.reg_mask)


def assign_roles(
    proposals,
    gts,
    iou_mode: str = "3d",
    pos_threshold: float = 0.6,
    neg_threshold: float = 0.45,
    reg_threshold: float = 0.55,
) -> Roles:
    """Classify proposals by their best IoU with any ground truth.

    Positive above ``pos_threshold``, negative below ``neg_threshold``, ignored
    in between; regression-eligible at or above ``reg_threshold``.
    """
    n = len(proposals)
    if len(gts) == 0 or n == 0:
        return Roles(np.zeros(n), np.full(n, -1), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
    ious = iou_matrix(proposals, gts, iou_mode)
    best = np.argmax(ious, axis=1)
    iou = ious[np.arange(n), best]
    cls = np.full(n, -1, dtype=np.int64)
    cls[iou > pos_threshold] = 1
    cls[iou < neg_threshold] = 0
    return Roles(iou, best, cls, iou >= reg_threshold)


# ---------------------------------------------------------------- loss


@dataclass
class TargetBatch:
    """Stacked targets for ``M`` proposals."""

    cls: np.ndarray  # (M,) in {1, 0, -1}
    reg_mask: np.ndarray  # (M,) bool
    onehot: np.ndarray  # (M, reg_width)
    reg: np.ndarray  # (M, 7)

    def __len__(self) -> int:
        return len(self.cls)

    @classmethod
    def stack(cls, targets: list[TargetSet], coder: BoxCoder) -> "TargetBatch":
        if not targets:
            return cls(np.zeros(0, np.int64), np.zeros(0, bool), np.zeros((0, coder.reg_width)), np.zeros((0, 7)))
        vecs = [targets_to_vector(t, coder) for t in targets]
        return cls(
            np.array([t.cls for t in targets], dtype=np.int64),
            np.array([t.reg_eligible for t in targets], dtype=bool),
            np.stack([v[0] for v in vecs]),
            np.stack([v[1] for v in vecs]),
        )

    def normalizers(self) -> tuple[int, int, int]:
        """(non-ignored count, batch size |B|, |B_reg|)."""
        return int((self.cls >= 0).sum()), len(self.cls), int(self.reg_mask.sum())


def build_targets(proposals, gts, roles: Roles, coder: BoxCoder) -> TargetBatch:
    targets = []
    for i, p in enumerate(proposals):
        if roles.reg_mask[i] or (len(gts) and roles.gt_index[i] >= 0):
            t = encode_targets(p, gts[roles.gt_index[i]], coder, int(roles.cls[i]), bool(roles.reg_mask[i]))
        else:
            t = encode_targets(p, p, coder, int(roles.cls[i]), False)
        targets.append(t)
    return TargetBatch.stack(targets, coder)


def total_loss(cls_logits: Tensor, reg: Tensor, targets: TargetBatch, coder: BoxCoder | None = None, norms=None):
    """Joint classification + binned regression loss.

    ``L_cls`` is the mean proposal BCE over non-ignored proposals. Over the
    regression-eligible subset ``B_reg``, bin-classification losses are summed
    and divided by the batch size ``|B|``, while smooth-L1 losses on the
    ground-truth bin's offset (and the residual features) are divided by
    ``|B_reg|``. ``norms`` overrides the ``(n_cls, |B|, |B_reg|)`` normalisers,
    which lets gradient accumulation over chunks reproduce a whole-batch loss.

    Returns ``(loss, components)`` where components holds float values.
    """
    coder = coder or BoxCoder()
    n_cls, n_batch, n_reg = norms if norms is not None else targets.normalizers()
    logits = cls_logits.reshape(-1)
    valid = np.flatnonzero(targets.cls >= 0)
    zero = Tensor(0.0)
    l_cls = zero
    if len(valid) and n_cls > 0:
        l_cls = bce_with_logits(logits[valid], targets.cls[valid].astype(np.float64)).sum() * (1.0 / n_cls)
    R = np.flatnonzero(targets.reg_mask)
    l_bin, l_res = zero, zero
    if len(R) and n_reg > 0:
        r = reg[R]
        onehot = targets.onehot[R]
        lay = coder.layout
        bin_terms, res_terms = [], []
        for j, f in enumerate(BINNED):
            sl = lay[f + "_cls"]
            scores, oh = r[:, sl], onehot[:, sl]
            if coder.bin_loss == "bce":
                bin_terms.append(bce_with_logits(scores, oh).mean(axis=1))
            else:
                bin_terms.append((log_softmax(scores, axis=1) * (-oh)).sum(axis=1))
            pred = (r[:, lay[f + "_reg"]] * oh).sum(axis=1)
            res_terms.append(smooth_l1(pred - targets.reg[R, j]))
        for j, f in enumerate(RESIDUAL, start=len(BINNED)):
            res_terms.append(smooth_l1(r[:, lay[f]] - targets.reg[R, j]))
        l_bin = _sum_terms(bin_terms) * (1.0 / n_batch)
        l_res = _sum_terms(res_terms) * (1.0 / n_reg)
    loss = l_cls + l_bin + l_res
    return loss, {"cls": l_cls.item(), "bin": l_bin.item(), "reg": l_res.item(), "total": loss.item()}


def _sum_terms(terms: list[Tensor]) -> Tensor:
    acc = terms[0].sum()
    for t in terms[1:]:
        acc = acc + t.sum()
    return acc
