"""Per-proposal refinement network: crop, canonicalise, sample, GCN stack, heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Box7, PointCloud, canonicalize, points_in_box
from .gcn import GlobalFeature, ResidualStack
from .nn.autograd import DimensionError, Tensor, concat, tmax
from .nn.layers import MLP, Linear, Module
from .rng import SplitMix64, derive_seed


@dataclass
class RgcnConfig:
    n_layers: int = 5
    filters: int = 64
    k: int = 16
    c_global: int = 1024
    margin: float = 1.0
    kernel: str = "mrgcn"
    residual: bool = True
    dilation: bool = True
    dynamic: bool = True
    use_rpn: bool = True
    c_rpn: int = 128
    num_points: int = 512
    head_hidden: int = 256
    mlp_depth: int = 1

    @property
    def out_width(self) -> int:
        return self.n_layers * self.filters + self.c_global


@dataclass
class ProposalInput:
    coords: np.ndarray  # (P, 3) canonical
    rpn: np.ndarray | None  # (P, C_rpn)
    box: Box7
    empty: bool
    source_idx: np.ndarray


@dataclass
class HeadOutput:
    cls: Tensor  # (B,)
    reg: Tensor  # (B, 46)


def prepare_proposal_input(
    cloud: PointCloud, rpn_feats: np.ndarray | None, proposal: Box7, cfg: RgcnConfig, seed: int
) -> ProposalInput:
    """Crop the margin-grown proposal, move it to the canonical frame and sample ``P`` points."""
    P = cfg.num_points
    idx = points_in_box(cloud, proposal, cfg.margin)
    c_rpn = rpn_feats.shape[1] if rpn_feats is not None else 0
    if len(idx) == 0:
        rpn = np.zeros((P, c_rpn)) if rpn_feats is not None else None
        return ProposalInput(np.zeros((P, 3)), rpn, proposal, True, idx)
    rng = SplitMix64(seed)
    pick = rng.choice(len(idx), P, replace=len(idx) < P)
    src = idx[pick]
    coords = canonicalize(cloud.coords[src], proposal)
    rpn = rpn_feats[src] if rpn_feats is not None else None
    return ProposalInput(coords, rpn, proposal, False, src)


def stack_inputs(inputs: list[ProposalInput], use_rpn: bool) -> tuple[np.ndarray, np.ndarray | None]:
    coords = np.stack([p.coords for p in inputs])
    if not use_rpn:
        return coords, None
    if any(p.rpn is None for p in inputs):
        raise ValueError("RPN features are enabled but a proposal has none; set use_rpn = false")
    return coords, np.stack([p.rpn for p in inputs])


class Heads(Module):
    """Classification (1 logit) and regression branches, each a 2-layer MLP."""

    def __init__(self, in_width: int, hidden: int, reg_width: int, seed: int):
        self.in_width = in_width
        self.cls = MLP([in_width, hidden, 1], derive_seed(seed, 1))
        self.reg = MLP([in_width, hidden, reg_width], derive_seed(seed, 2))

    def __call__(self, feature: Tensor) -> HeadOutput:
        return heads_forward(feature, self)


def heads_forward(feature: Tensor, params: Heads) -> HeadOutput:
    if feature.shape[-1] != params.in_width:
        raise DimensionError(f"feature width {feature.shape[-1]} does not match head input {params.in_width}")
    return HeadOutput(params.cls(feature).reshape(feature.shape[:-1]), params.reg(feature))


class Rgcn(Module):
    def __init__(self, cfg: RgcnConfig, seed: int):
        self.cfg = cfg
        F = cfg.filters
        if cfg.use_rpn:
            self.coord_proj = Linear(3, cfg.c_rpn, derive_seed(seed, 1))
            self.reduce = Linear(2 * cfg.c_rpn, F, derive_seed(seed, 2))
        else:
            self.coord_proj = Linear(3, F, derive_seed(seed, 1))
            self.reduce = None
        self.stack = ResidualStack(
            F,
            F,
            cfg.n_layers,
            cfg.kernel,
            cfg.k,
            derive_seed(seed, 3),
            residual=cfg.residual,
            linear_dilation=cfg.dilation,
            dynamic=cfg.dynamic,
            mlp_depth=cfg.mlp_depth,
        )
        self.glob = GlobalFeature(cfg.n_layers * F, cfg.c_global, derive_seed(seed, 4))

    def node_features(self, coords: np.ndarray, rpn: np.ndarray | None) -> Tensor:
        c = self.coord_proj(Tensor(coords))
        if self.reduce is None:
            return c
        if rpn is None or rpn.shape[-1] != self.cfg.c_rpn:
            got = None if rpn is None else rpn.shape
            raise DimensionError(f"RPN features of shape {got} do not match c_rpn = {self.cfg.c_rpn}")
        return self.reduce(concat([c, Tensor(rpn)], axis=-1))

    def __call__(self, coords: np.ndarray, rpn: np.ndarray | None = None) -> Tensor:
        return rgcn_forward(coords, rpn, self)


def rgcn_forward(coords: np.ndarray, rpn: np.ndarray | None, model: Rgcn) -> Tensor:
    """``(B, P, 3)`` canonical points (+ RPN features) -> ``(B, N_r*F_r + C_r)`` proposal features."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
        rpn = None if rpn is None else np.asarray(rpn)[None]
    x = model.node_features(coords, rpn)
    out = model.stack(x)
    fused = model.glob(out.per_layer_feats)
    return tmax(fused, axis=1)
