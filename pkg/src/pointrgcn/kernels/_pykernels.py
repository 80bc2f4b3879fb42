"""Pure numpy/Python versions of the compiled kernels (same contracts, same results)."""
from __future__ import annotations

import numpy as np

EDGE_EPS = 1e-9
AREA_EPS = 1e-12
_ROW_CHUNK = 64


def dilated_ranks(m: int, k: int, d: int) -> list[int]:
    """Candidate ranks chosen from a sorted list of ``m`` candidates."""
    m_out = min(k, m)
    chosen = list(range(d - 1, m, d))[:m_out]
    taken = set(chosen)
    for r in range(m):
        if len(chosen) >= m_out:
            break
        if r not in taken:
            chosen.append(r)
    return chosen


def knn_dilated(feats: np.ndarray, k: int, d: int) -> np.ndarray:
    n, c = feats.shape
    m_out = min(k, n - 1) if n > 0 else 0
    if n <= 1:
        return np.zeros((n, max(m_out, 0)), dtype=np.int64)
    m = min(k * d, n - 1)
    ranks = np.asarray(dilated_ranks(m, k, d), dtype=np.int64)
    out = np.empty((n, m_out), dtype=np.int64)
    for lo in range(0, n, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, n)
        # accumulate channel by channel to match the compiled kernel's summation order
        dist = np.zeros((hi - lo, n))
        for t in range(c):
            diff = feats[lo:hi, t, None] - feats[None, :, t]
            dist += diff * diff
        dist[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")[:, :m]
        out[lo:hi] = order[:, ranks]
    return out


def _signed_area(xs, ys) -> float:
    n = len(xs)
    s = 0.0
    for i in range(n):
        j = (i + 1) % n
        s += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * s


def _ccw(quad: np.ndarray) -> list[tuple[float, float]]:
    pts = [(float(x), float(y)) for x, y in quad]
    if _signed_area([p[0] for p in pts], [p[1] for p in pts]) < 0:
        pts[1], pts[3] = pts[3], pts[1]
    return pts


def clip_area(subject: list[tuple[float, float]], clip: list[tuple[float, float]]) -> float:
    """Sutherland-Hodgman intersection area of two counter-clockwise convex polygons."""
    poly = list(subject)
    nc = len(clip)
    for e in range(nc):
        if not poly:
            break
        qx, qy = clip[e]
        ex = clip[(e + 1) % nc][0] - qx
        ey = clip[(e + 1) % nc][1] - qy
        new = []
        n = len(poly)
        for i in range(n):
            sx, sy = poly[i - 1]
            cx, cy = poly[i]
            s_in = ex * (sy - qy) - ey * (sx - qx)
            c_in = ex * (cy - qy) - ey * (cx - qx)
            if c_in >= -EDGE_EPS:
                if s_in < -EDGE_EPS:
                    t = s_in / (s_in - c_in)
                    new.append((sx + t * (cx - sx), sy + t * (cy - sy)))
                new.append((cx, cy))
            elif s_in >= -EDGE_EPS:
                t = s_in / (s_in - c_in)
                new.append((sx + t * (cx - sx), sy + t * (cy - sy)))
        poly = new
    if len(poly) < 3:
        return 0.0
    area = abs(_signed_area([p[0] for p in poly], [p[1] for p in poly]))
    return area if area >= AREA_EPS else 0.0


def quad_intersection_matrix(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    out = np.zeros((len(ca), len(cb)))
    qa = [_ccw(q) for q in ca]
    qb = [_ccw(q) for q in cb]
    for i, p in enumerate(qa):
        for j, q in enumerate(qb):
            out[i, j] = clip_area(p, q)
    return out


def max_gather(rows: np.ndarray, nbr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = rows[nbr.T]  # (k, R, C)
    best = g.max(axis=0)
    first = (g == best).argmax(axis=0)
    return best, nbr[np.arange(len(nbr))[:, None], first]


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    np.add.at(out, idx, src)
