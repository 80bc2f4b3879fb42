"""EdgeConv and MRGCN kernels, residual GCN stacks and global-feature fusion.

All forwards take batched node features of shape ``(B, N, C)`` where each of
the ``B`` graphs is independent (one proposal, or one frame).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .graph import batched_neighbors, layer_dilation
from .nn.autograd import DimensionError, Tensor, broadcast_to, concat, gather_rows, max_relative, tmax
from .nn.layers import MLP, Linear, Module
from .rng import derive_seed

KERNELS = ("edgeconv", "mrgcn")


class MlpCounter:
    def __init__(self):
        self.count = 0
        self.per_call: list[int] = []

    def add(self, n: int) -> None:
        self.count += n
        self.per_call.append(n)


_counter: MlpCounter | None = None


@contextlib.contextmanager
def count_mlp_applications():
    """Count the rows each GCN kernel pushes through its shared MLP."""
    global _counter
    prev, _counter = _counter, MlpCounter()
    try:
        yield _counter
    finally:
        _counter = prev


def _count(n: int) -> None:
    if _counter is not None:
        _counter.add(n)


class GcnLayer(Module):
    """One graph convolution. The shared MLP maps ``2 * c_in`` to ``f_out``."""

    def __init__(self, kernel: str, c_in: int, f_out: int, seed: int, mlp_depth: int = 1):
        if kernel not in KERNELS:
            raise ValueError(f"unknown GCN kernel {kernel!r}; expected one of {KERNELS}")
        self.kernel = kernel
        self.c_in, self.f_out = c_in, f_out
        widths = [2 * c_in] + [f_out] * mlp_depth
        self.mlp = MLP(widths, seed, final_relu=True)

    def __call__(self, x: Tensor, neighbors: np.ndarray) -> Tensor:
        if self.kernel == "edgeconv":
            return edgeconv_forward(x, neighbors, self)
        return mrgcn_forward(x, neighbors, self)


def _check(x: Tensor, neighbors: np.ndarray, params: GcnLayer):
    if x.ndim != 3 or x.shape[-1] != params.c_in:
        raise DimensionError(f"node features {x.shape} do not match layer input width {params.c_in}")
    if neighbors.shape[:2] != x.shape[:2]:
        raise DimensionError(f"neighbour lists {neighbors.shape} do not match node features {x.shape}")


def edgeconv_forward(x: Tensor, neighbors: np.ndarray, params: GcnLayer) -> Tensor:
    """``max_u MLP([h_v, h_u - h_v])`` over each node's neighbours."""
    _check(x, neighbors, params)
    B, N, C = x.shape
    k = neighbors.shape[-1]
    if k == 0:
        _count(B * N)
        return params.mlp(concat([x, Tensor(np.zeros_like(x.data))], axis=-1))
    nb = gather_rows(x, neighbors)
    center = broadcast_to(x.reshape(B, N, 1, C), (B, N, k, C))
    edges = concat([center, nb - center], axis=-1)
    _count(B * N * k)
    return tmax(params.mlp(edges), axis=2)


def mrgcn_forward(x: Tensor, neighbors: np.ndarray, params: GcnLayer) -> Tensor:
    """``MLP([h_v, max_u (h_u - h_v)])``: pool first, one MLP application per node."""
    _check(x, neighbors, params)
    B, N, _ = x.shape
    pooled = max_relative(x, neighbors)
    _count(B * N)
    return params.mlp(concat([x, pooled], axis=-1))


@dataclass
class StackOutput:
    per_layer_feats: list[Tensor]
    fused: Tensor | None = None
    graphs: list[np.ndarray] | None = None


class ResidualStack(Module):
    """``n_layers`` GCN layers of width ``f`` with optional residual skips.

    A bias-free projection maps the input to width ``f`` first when needed.
    """

    def __init__(
        self,
        c_in: int,
        f: int,
        n_layers: int,
        kernel: str,
        k: int,
        seed: int,
        residual: bool = True,
        linear_dilation: bool = False,
        dynamic: bool = True,
        mlp_depth: int = 1,
    ):
        if n_layers < 1:
            raise ValueError(f"a GCN stack needs at least one layer, got {n_layers}")
        self.k, self.f = k, f
        self.residual, self.linear_dilation, self.dynamic = residual, linear_dilation, dynamic
        self.input_proj = Linear(c_in, f, derive_seed(seed, 999), bias=False) if c_in != f else None
        self.layers = [GcnLayer(kernel, f, f, derive_seed(seed, i), mlp_depth) for i in range(n_layers)]

    def __call__(self, x: Tensor) -> StackOutput:
        return residual_stack_forward(x, self)


def residual_stack_forward(x: Tensor, stack: ResidualStack) -> StackOutput:
    if stack.input_proj is not None:
        x = stack.input_proj(x)
    elif x.shape[-1] != stack.f:
        raise DimensionError(f"stack input width {x.shape[-1]} does not match layer width {stack.f}")
    static_feats = x.data
    outs, graphs = [], []
    for l, layer in enumerate(stack.layers, start=1):
        d = layer_dilation(l, stack.linear_dilation)
        nbrs = batched_neighbors(x.data if stack.dynamic else static_feats, stack.k, d)
        h = layer(x, nbrs)
        x = h + x if stack.residual else h
        outs.append(x)
        graphs.append(nbrs)
    return StackOutput(outs, graphs=graphs)


class GlobalFeature(Module):
    def __init__(self, local_width: int, c_global: int, seed: int):
        self.local_width, self.c_global = local_width, c_global
        self.proj = Linear(local_width, c_global, seed)

    def __call__(self, per_layer_feats: list[Tensor]) -> Tensor:
        return global_feature(per_layer_feats, self)


def global_feature(per_layer_feats: list[Tensor], params: GlobalFeature) -> Tensor:
    """Concatenate layer outputs, project to a global vector by max over nodes, broadcast back.

    Returns ``(B, N, L*F + C_global)``.
    """
    if not per_layer_feats:
        raise ValueError("global_feature needs at least one layer output")
    local = concat(per_layer_feats, axis=-1) if len(per_layer_feats) > 1 else per_layer_feats[0]
    B, N, _ = local.shape
    g = tmax(params.proj(local), axis=1)
    gb = broadcast_to(g.reshape(B, 1, params.c_global), (B, N, params.c_global))
    return concat([local, gb], axis=-1)
