# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: dilated kNN, rotated-rectangle clipping, scatter-add."""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

cdef enum:
    MAXV = 16

cdef double EDGE_EPS = 1e-9
cdef double AREA_EPS = 1e-12


def knn_dilated(double[:, ::1] feats, int k, int d):
    cdef Py_ssize_t n = feats.shape[0], c = feats.shape[1]
    cdef Py_ssize_t m_out = min(k, n - 1) if n > 0 else 0
    out_arr = np.zeros((n, max(m_out, 0)), dtype=np.int64)
    if n <= 1:
        return out_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t m = min(<Py_ssize_t>k * d, n - 1)
    cdef double[::1] bd = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] bi = np.empty(m, dtype=np.int64)
    cdef cnp.uint8_t[::1] used = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t i, j, t, pos, cnt, nsel, r
    cdef double dist, diff, fi
    # channel-major copy so the distance row is accumulated with unit stride
    cdef double[:, ::1] ft = np.ascontiguousarray(np.asarray(feats).T)
    cdef double[::1] drow = np.empty(n, dtype=np.float64)
    for i in range(n):
        for j in range(n):
            drow[j] = 0.0
        for t in range(c):
            fi = ft[t, i]
            for j in range(n):
                diff = fi - ft[t, j]
                drow[j] += diff * diff
        cnt = 0
        for j in range(n):
            if j == i:
                continue
            dist = drow[j]
            if cnt == m and dist >= bd[m - 1]:
                continue
            pos = cnt if cnt < m else m - 1
            while pos > 0 and bd[pos - 1] > dist:
                if pos < m:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                pos -= 1
            bd[pos] = dist
            bi[pos] = j
            if cnt < m:
                cnt += 1
        nsel = 0
        for r in range(m):
            used[r] = 0
        r = d - 1
        while r < m and nsel < m_out:
            out[i, nsel] = bi[r]
            used[r] = 1
            nsel += 1
            r += d
        r = 0
        while nsel < m_out and r < m:
            if not used[r]:
                out[i, nsel] = bi[r]
                nsel += 1
            r += 1
    return out_arr


cdef inline double _cross(double ax, double ay, double bx, double by) nogil:
    return ax * by - ay * bx


cdef double _poly_area(double* xs, double* ys, int n) nogil:
    cdef double s = 0.0
    cdef int i, j
    for i in range(n):
        j = (i + 1) % n
        s += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * s


cdef double _clip_area(double* px, double* py, double* qx, double* qy) nogil:
    # px/py: subject quad (ccw), qx/qy: clip quad (ccw).
    cdef double ax[MAXV]
    cdef double ay[MAXV]
    cdef double bx[MAXV]
    cdef double by[MAXV]
    cdef int n = 4, nn, e, i, j
    cdef double ex, ey, sx, sy, cx, cy, s_in, c_in, t
    for i in range(4):
        ax[i] = px[i]
        ay[i] = py[i]
    for e in range(4):
        if n == 0:
            break
        ex = qx[(e + 1) % 4] - qx[e]
        ey = qy[(e + 1) % 4] - qy[e]
        nn = 0
        for i in range(n):
            j = (i + n - 1) % n
            sx = ax[j]
            sy = ay[j]
            cx = ax[i]
            cy = ay[i]
            s_in = _cross(ex, ey, sx - qx[e], sy - qy[e])
            c_in = _cross(ex, ey, cx - qx[e], cy - qy[e])
            if c_in >= -EDGE_EPS:
                if s_in < -EDGE_EPS and nn < MAXV:
                    t = s_in / (s_in - c_in)
                    bx[nn] = sx + t * (cx - sx)
                    by[nn] = sy + t * (cy - sy)
                    nn += 1
                if nn < MAXV:
                    bx[nn] = cx
                    by[nn] = cy
                    nn += 1
            elif s_in >= -EDGE_EPS and nn < MAXV:
                t = s_in / (s_in - c_in)
                bx[nn] = sx + t * (cx - sx)
                by[nn] = sy + t * (cy - sy)
                nn += 1
        n = nn
        for i in range(n):
            ax[i] = bx[i]
            ay[i] = by[i]
    if n < 3:
        return 0.0
    t = fabs(_poly_area(ax, ay, n))
    return t if t >= AREA_EPS else 0.0


cdef void _load_ccw(double[:, :, ::1] c, Py_ssize_t i, double* xs, double* ys) nogil:
    cdef int v
    for v in range(4):
        xs[v] = c[i, v, 0]
        ys[v] = c[i, v, 1]
    if _poly_area(xs, ys, 4) < 0:
        xs[1], xs[3] = xs[3], xs[1]
        ys[1], ys[3] = ys[3], ys[1]


def quad_intersection_matrix(double[:, :, ::1] ca, double[:, :, ::1] cb):
    """Pairwise intersection areas of convex quads, shapes (n,4,2) x (m,4,2)."""
    cdef Py_ssize_t na = ca.shape[0], nb = cb.shape[0], i, j
    out_arr = np.zeros((na, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double px[4]
    cdef double py[4]
    cdef double qx[4]
    cdef double qy[4]
    with nogil:
        for i in range(na):
            _load_ccw(ca, i, px, py)
            for j in range(nb):
                _load_ccw(cb, j, qx, qy)
                out[i, j] = _clip_area(px, py, qx, qy)
    return out_arr


def max_gather(double[:, ::1] rows, cnp.int64_t[:, ::1] nbr):
    """Per-channel max over ``rows[nbr[r]]`` and the first row attaining it."""
    cdef Py_ssize_t R = nbr.shape[0], k = nbr.shape[1], c = rows.shape[1], r, j, t
    cdef cnp.int64_t u
    best_arr = np.empty((R, c), dtype=np.float64)
    src_arr = np.empty((R, c), dtype=np.int64)
    cdef double[:, ::1] best = best_arr
    cdef cnp.int64_t[:, ::1] src = src_arr
    cdef double* bp
    cdef double* rp
    cdef cnp.int64_t* sp
    cdef bint gt
    if R == 0 or c == 0:
        return best_arr, src_arr
    with nogil:
        for r in range(R):
            bp = &best[r, 0]
            sp = &src[r, 0]
            u = nbr[r, 0]
            rp = &rows[u, 0]
            for t in range(c):
                bp[t] = rp[t]
                sp[t] = u
            for j in range(1, k):
                u = nbr[r, j]
                rp = &rows[u, 0]
                for t in range(c):
                    # branch-free select; updates are unpredictable
                    gt = rp[t] > bp[t]
                    bp[t] = rp[t] if gt else bp[t]
                    sp[t] = u if gt else sp[t]
    return best_arr, src_arr


def scatter_add_rows(double[:, ::1] out, cnp.int64_t[::1] idx, double[:, ::1] src):
    """out[idx[r]] += src[r] for every row r (repeated indices accumulate)."""
    cdef Py_ssize_t r, t, c = src.shape[1], row
    with nogil:
        for r in range(idx.shape[0]):
            row = idx[r]
            for t in range(c):
                out[row, t] += src[r, t]
