"""Hot kernels with a compiled (Cython) backend and a pure-Python fallback.

The compiled module is used when it was built; set ``POINTRGCN_PURE_PYTHON=1``
to force the fallback. :data:`BACKEND` names the active one.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

_c = None
if os.environ.get("POINTRGCN_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _c
    except ImportError:  # extension not built
        _c = None

BACKEND = "cython" if _c is not None else "python"


def knn_dilated(feats, k: int, d: int, backend: str | None = None) -> np.ndarray:
    """Dilated kNN neighbour lists, one row of ``min(k, N-1)`` indices per node."""
    x = np.ascontiguousarray(feats, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an N x C matrix, got shape {x.shape}")
    if k < 1 or d < 1:
        raise ValueError(f"k and d must be >= 1 (k={k}, d={d})")
    if _use_c(backend):
        return np.asarray(_c.knn_dilated(x, int(k), int(d)))
    return _pykernels.knn_dilated(x, int(k), int(d))


def quad_intersection_matrix(ca, cb, backend: str | None = None) -> np.ndarray:
    """Pairwise intersection areas of convex quadrilaterals (n,4,2) x (m,4,2)."""
    a = np.ascontiguousarray(ca, dtype=np.float64).reshape(-1, 4, 2)
    b = np.ascontiguousarray(cb, dtype=np.float64).reshape(-1, 4, 2)
    if _use_c(backend):
        return np.asarray(_c.quad_intersection_matrix(a, b))
    return _pykernels.quad_intersection_matrix(a, b)


def max_gather(rows: np.ndarray, nbr: np.ndarray, backend: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """For ``rows`` (R0, C) and ``nbr`` (R, k>=1): per-channel max of ``rows[nbr[r]]`` and its first argmax row."""
    x = np.ascontiguousarray(rows, dtype=np.float64)
    idx = np.ascontiguousarray(nbr, dtype=np.int64)
    if _use_c(backend):
        best, src = _c.max_gather(x, idx)
        return np.asarray(best), np.asarray(src)
    return _pykernels.max_gather(x, idx)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray, backend: str | None = None) -> None:
    """In-place ``out[idx[r]] += src[r]``; ``out`` must be C-contiguous float64."""
    if _use_c(backend) and out.flags.c_contiguous and out.dtype == np.float64:
        _c.scatter_add_rows(
            out,
            np.ascontiguousarray(idx, dtype=np.int64),
            np.ascontiguousarray(src, dtype=np.float64),
        )
    else:
        _pykernels.scatter_add_rows(out, idx, src)


def _use_c(backend: str | None) -> bool:
    if backend is None:
        return _c is not None
    if backend == "cython":
        if _c is None:
            raise RuntimeError("compiled kernels are not available")
        return True
    if backend == "python":
        return False
    raise ValueError(f"unknown backend {backend!r}")
