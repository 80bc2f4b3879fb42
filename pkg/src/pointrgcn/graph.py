"""Dynamic dilated kNN graphs over node features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class FeatureGraph:
    node_feats: np.ndarray
    neighbors: np.ndarray  # (N, min(k, N-1)) int64
    k: int
    dilation: int = 1

    @property
    def num_nodes(self) -> int:
        return len(self.node_feats)


def knn_graph(feats, k: int, d: int = 1) -> FeatureGraph:
    """Build the dilated kNN graph of an ``N x C`` feature matrix.

    Other nodes are ranked by Euclidean distance (ties to the lower index). Of
    the nearest ``min(k*d, N-1)`` candidates, ranks ``d-1, 2d-1, ...`` are kept;
    when fewer than ``min(k, N-1)`` survive the list is topped up from the
    remaining candidates in rank order. Self loops never appear.
    """
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    nbrs = kernels.knn_dilated(x, k, d)
    return FeatureGraph(x, nbrs, k, d)


def layer_dilation(layer: int, linear_dilation: bool) -> int:
    """Dilation for 1-indexed layer ``layer``."""
    return layer if linear_dilation else 1


def rebuild_per_layer(prev_layer_output, k: int, layer: int, linear_dilation: bool = True) -> FeatureGraph:
    return knn_graph(prev_layer_output, k, layer_dilation(layer, linear_dilation))


def batched_neighbors(feats: np.ndarray, k: int, d: int) -> np.ndarray:
    """Neighbour indices for a ``(B, N, C)`` batch of independent graphs -> ``(B, N, m)``."""
    B, N = feats.shape[:2]
    m = min(k, N - 1) if N > 0 else 0
    out = np.empty((B, N, max(m, 0)), dtype=np.int64)
    for b in range(B):
        out[b] = kernels.knn_dilated(feats[b], k, d)
    return out
