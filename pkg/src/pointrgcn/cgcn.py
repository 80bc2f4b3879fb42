"""Per-frame context network over proposal features, and the combined two-stage model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gcn import GlobalFeature, ResidualStack
from .nn.autograd import Tensor, concat, tmax
from .nn.layers import MLP, Module
from .rgcn import HeadOutput, Heads, ProposalInput, Rgcn, RgcnConfig, stack_inputs
from .rng import derive_seed

CGCN_INPUTS = ("rgcn", "pointnet")


@dataclass
class CgcnConfig:
    n_layers: int = 3
    filters: int = 64
    k: int = 16
    c_global: int = 1024
    kernel: str = "edgeconv"
    residual: bool = True
    dilation: bool = False
    dynamic: bool = True
    rpn_global: bool = False
    head_hidden: int = 256
    mlp_depth: int = 1

    @property
    def out_width(self) -> int:
        return self.n_layers * self.filters + self.c_global


class Cgcn(Module):
    def __init__(self, in_width: int, cfg: CgcnConfig, seed: int):
        self.cfg = cfg
        self.in_width = in_width
        self.stack = ResidualStack(
            in_width,
            cfg.filters,
            cfg.n_layers,
            cfg.kernel,
            cfg.k,
            derive_seed(seed, 1),
            residual=cfg.residual,
            linear_dilation=cfg.dilation,
            dynamic=cfg.dynamic,
            mlp_depth=cfg.mlp_depth,
        )
        self.glob = GlobalFeature(cfg.n_layers * cfg.filters, cfg.c_global, derive_seed(seed, 2))

    def __call__(self, node_feats: Tensor) -> Tensor:
        return cgcn_forward(node_feats, self)


def cgcn_forward(node_feats: Tensor, model: Cgcn) -> Tensor:
    """``(M, D)`` proposal features of one frame -> ``(M, N_c*F_c + C_c)`` context features."""
    M, D = node_feats.shape
    out = model.stack(node_feats.reshape(1, M, D))
    fused = model.glob(out.per_layer_feats)
    return fused.reshape(M, model.cfg.out_width)


class PointNetEncoder(Module):
    """Shared point MLP + max pool; a non-graph per-proposal feature for C-GCN ablations."""

    def __init__(self, in_width: int, out_width: int, seed: int):
        self.mlp = MLP([in_width, 64, out_width], seed, final_relu=True)

    def __call__(self, coords: np.ndarray, rpn: np.ndarray | None) -> Tensor:
        x = coords if rpn is None else np.concatenate([coords, rpn], axis=-1)
        return tmax(self.mlp(Tensor(x)), axis=1)


@dataclass
class ModelConfig:
    rgcn: RgcnConfig = field(default_factory=RgcnConfig)
    cgcn: CgcnConfig = field(default_factory=CgcnConfig)
    use_cgcn: bool = True
    cgcn_input: str = "rgcn"
    pointnet_width: int = 512
    reg_width: int = 46


@dataclass
class StageOutputs:
    heads: list[HeadOutput]  # one per supervised stage, final stage last

    @property
    def final(self) -> HeadOutput:
        return self.heads[-1]


class PointRGCN(Module):
    """R-GCN (or a PointNet stand-in) followed optionally by C-GCN, each with its own heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.cgcn_input not in CGCN_INPUTS:
            raise ValueError(f"cgcn_input must be one of {CGCN_INPUTS}, got {cfg.cgcn_input!r}")
        self.cfg = cfg
        rc = cfg.rgcn
        if cfg.cgcn_input == "pointnet" and cfg.use_cgcn:
            c_in = 3 + (rc.c_rpn if rc.use_rpn else 0)
            self.encoder = PointNetEncoder(c_in, cfg.pointnet_width, derive_seed(seed, 10))
            self.rgcn, self.rgcn_heads = None, None
            feat_width = cfg.pointnet_width
        else:
            self.encoder = None
            self.rgcn = Rgcn(rc, derive_seed(seed, 1))
            self.rgcn_heads = Heads(rc.out_width, rc.head_hidden, cfg.reg_width, derive_seed(seed, 2))
            feat_width = rc.out_width
        if cfg.use_cgcn:
            cc = cfg.cgcn
            node_width = feat_width + (rc.c_rpn if cc.rpn_global else 0)
            self.cgcn = Cgcn(node_width, cc, derive_seed(seed, 3))
            self.cgcn_heads = Heads(cc.out_width, cc.head_hidden, cfg.reg_width, derive_seed(seed, 4))
        else:
            self.cgcn, self.cgcn_heads = None, None

    def proposal_features(self, inputs: list[ProposalInput]) -> Tensor:
        coords, rpn = stack_inputs(inputs, self.cfg.rgcn.use_rpn)
        if self.encoder is not None:
            return self.encoder(coords, rpn)
        return self.rgcn(coords, rpn)

    def __call__(self, inputs: list[ProposalInput], frame_sizes: list[int] | None = None) -> StageOutputs:
        """Run all stages; ``frame_sizes`` splits ``inputs`` into frames for C-GCN."""
        feats = self.proposal_features(inputs)
        heads = []
        if self.rgcn_heads is not None:
            heads.append(self.rgcn_heads(feats))
        if self.cgcn is not None:
            sizes = frame_sizes or [len(inputs)]
            if self.cfg.cgcn.rpn_global:
                feats = concat([feats, Tensor(_rpn_pool(inputs, self.cfg.rgcn.c_rpn))], axis=-1)
            ctx, start = [], 0
            for m in sizes:
                ctx.append(self.cgcn(feats[start:start + m]))
                start += m
            ctx = concat(ctx, axis=0) if len(ctx) > 1 else ctx[0]
            heads.append(self.cgcn_heads(ctx))
        return StageOutputs(heads)


def _rpn_pool(inputs: list[ProposalInput], c_rpn: int) -> np.ndarray:
    out = np.zeros((len(inputs), c_rpn))
    for i, p in enumerate(inputs):
        if p.rpn is not None and not p.empty:
            out[i] = p.rpn.max(axis=0)
    return out
