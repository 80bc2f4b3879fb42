"""Flat ``key = value`` run configuration.

Every tunable of the pipeline is a key here. Defaults are the full-size
setup: 5-layer MRGCN R-GCN (64 filters, k=16, 1024 global), 3-layer EdgeConv
C-GCN, IoU thresholds 0.6 / 0.45 / 0.55, Adam at 2e-4, 50 epochs, 256
proposals per batch, 300 proposals per frame with 64 used for the losses.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .cgcn import CgcnConfig, ModelConfig
from .codec import BoxCoder
from .rgcn import RgcnConfig
from .synth import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # R-GCN
    rgcn_layers: int = 5
    rgcn_filters: int = 64
    rgcn_k: int = 16
    rgcn_global: int = 1024
    rgcn_kernel: str = "mrgcn"
    rgcn_residual: bool = True
    rgcn_dilation: bool = True
    rgcn_dynamic: bool = True
    rgcn_margin: float = 1.0
    rgcn_points: int = 512
    use_rpn_feats: bool = True
    c_rpn: int = 128
    head_hidden: int = 256
    mlp_depth: int = 1
    # C-GCN
    use_cgcn: bool = True
    cgcn_input: str = "rgcn"
    cgcn_layers: int = 3
    cgcn_filters: int = 64
    cgcn_k: int = 16
    cgcn_global: int = 1024
    cgcn_kernel: str = "edgeconv"
    cgcn_residual: bool = True
    cgcn_dilation: bool = False
    cgcn_dynamic: bool = True
    cgcn_rpn_feats: bool = False
    # targets and loss
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    reg_iou: float = 0.55
    iou_mode: str = "3d"
    canonical_targets: bool = True
    bin_loss: str = "bce"
    # training
    lr: float = 0.0002
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 256
    proposals_per_frame: int = 300
    loss_subset: int = 64
    balance_subset: bool = True
    augment: bool = True
    aug_yaw: float = math.pi / 4
    aug_translation: float = 0.5
    resample_points: bool = True
    forward_chunk: int = 16
    # inference
    score_threshold: float = 0.3
    nms_threshold: float = 0.1
    nms_mode: str = "bev"
    # synthetic data
    synth_vehicles: int = 3
    synth_extent: float = 30.0
    synth_clutter: int = 1000
    synth_surface: int = 300
    synth_proposals_per_gt: int = 4
    synth_rpn_feats: bool = True
    noise_x: float = 0.3
    noise_z: float = 0.3
    noise_theta: float = math.radians(10)
    noise_h: float = 0.153
    noise_w: float = 0.163
    noise_l: float = 0.388
    noise_y: float = 0.0
    # paths
    data_dir: str = ""
    model_path: str = ""
    output_dir: str = ""

    def __post_init__(self):
        choices = {
            "rgcn_kernel": ("mrgcn", "edgeconv"),
            "cgcn_kernel": ("mrgcn", "edgeconv"),
            "cgcn_input": ("rgcn", "pointnet"),
            "iou_mode": ("3d", "bev"),
            "nms_mode": ("3d", "bev"),
            "bin_loss": ("bce", "softmax"),
            "lr_schedule": ("constant", "cosine"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("rgcn_layers", "cgcn_layers", "rgcn_k", "cgcn_k", "rgcn_points", "batch_size", "loss_subset"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")

    # ------------------------------------------------------------ text form

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for i, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {i}: expected 'key = value', got {raw.strip()!r}")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ConfigError(f"line {i}: unknown config key {key!r}")
            values[key] = _parse(val, types[key], key, i)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        if path is None:
            return cls(**overrides)
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ derived configs

    def model_config(self) -> ModelConfig:
        rc = RgcnConfig(
            n_layers=self.rgcn_layers,
            filters=self.rgcn_filters,
            k=self.rgcn_k,
            c_global=self.rgcn_global,
            margin=self.rgcn_margin,
            kernel=self.rgcn_kernel,
            residual=self.rgcn_residual,
            dilation=self.rgcn_dilation,
            dynamic=self.rgcn_dynamic,
            use_rpn=self.use_rpn_feats,
            c_rpn=self.c_rpn,
            num_points=self.rgcn_points,
            head_hidden=self.head_hidden,
            mlp_depth=self.mlp_depth,
        )
        cc = CgcnConfig(
            n_layers=self.cgcn_layers,
            filters=self.cgcn_filters,
            k=self.cgcn_k,
            c_global=self.cgcn_global,
            kernel=self.cgcn_kernel,
            residual=self.cgcn_residual,
            dilation=self.cgcn_dilation,
            dynamic=self.cgcn_dynamic,
            rpn_global=self.cgcn_rpn_feats,
            head_hidden=self.head_hidden,
            mlp_depth=self.mlp_depth,
        )
        return ModelConfig(rc, cc, use_cgcn=self.use_cgcn, cgcn_input=self.cgcn_input)

    def epoch_lr(self, epoch: int, epochs: int | None = None) -> float:
        """Learning rate for ``epoch``; cosine decays to ``lr * lr_final_fraction`` at the last epoch."""
        if self.lr_schedule == "constant":
            return self.lr
        total = max((epochs or self.epochs) - 1, 1)
        frac = min(epoch / total, 1.0)
        lo = self.lr * self.lr_final_fraction
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * frac))

    def coder(self) -> BoxCoder:
        return BoxCoder(canonical=self.canonical_targets, bin_loss=self.bin_loss)

    def scene_spec(self, seed: int) -> SceneSpec:
        return SceneSpec(
            seed=seed,
            n_vehicles=self.synth_vehicles,
            ground_extent=self.synth_extent,
            clutter_points=self.synth_clutter,
            surface_points_per_vehicle=self.synth_surface,
            proposal_noise=(
                self.noise_x, self.noise_z, self.noise_theta,
                self.noise_h, self.noise_w, self.noise_l, self.noise_y,
            ),
            proposals_per_gt=self.synth_proposals_per_gt,
        )


def _parse(val: str, typ, key: str, line: int):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            low = val.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {val!r}")
        if name == "int":
            return int(val)
        if name == "float":
            return float(val)
        return val
    except ValueError as exc:
        raise ConfigError(f"line {line}: bad value for {key}: {exc}") from None
