# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-frame kernels, twin of nrsfm._kernels_py.

Scalar 3x3 arithmetic in C replaces the vectorized numpy paths; semantics
(guards, halving rule, stop tests) must stay in lockstep with the fallback.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport acos, cos, fabs, sin, sqrt

cnp.import_array()

BACKEND_NAME = "cython"

cdef double _EPS_ANGLE = 1e-8
cdef double _GUARD = 1e-12
cdef double _PI = 3.141592653589793


cdef inline void _mul(const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = (
                a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]
            )


cdef inline void _mul_bt(const double* a, const double* b, double* out) noexcept nogil:
    # out = a @ b.T
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = (
                a[3 * i] * b[3 * j]
                + a[3 * i + 1] * b[3 * j + 1]
                + a[3 * i + 2] * b[3 * j + 2]
            )


cdef inline void _exp3(const double* v, double* R) noexcept nogil:
    cdef double t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    cdef double t = sqrt(t2)
    cdef double a, b
    if t < _EPS_ANGLE:
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = sin(t) / t
        b = (1.0 - cos(t)) / t2
    cdef double kx = v[0], ky = v[1], kz = v[2]
    R[0] = 1.0 + b * (-ky * ky - kz * kz)
    R[1] = -a * kz + b * kx * ky
    R[2] = a * ky + b * kx * kz
    R[3] = a * kz + b * kx * ky
    R[4] = 1.0 + b * (-kx * kx - kz * kz)
    R[5] = -a * kx + b * ky * kz
    R[6] = -a * ky + b * kx * kz
    R[7] = a * kx + b * ky * kz
    R[8] = 1.0 + b * (-kx * kx - ky * ky)


cdef inline void _log3(const double* R, double* v) noexcept nogil:
    cdef double tr = R[0] + R[4] + R[8]
    cdef double c = (tr - 1.0) * 0.5
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    cdef double theta = acos(c)
    cdef double wx = 0.5 * (R[7] - R[5])
    cdef double wy = 0.5 * (R[2] - R[6])
    cdef double wz = 0.5 * (R[3] - R[1])
    cdef double f, mkk, n
    cdef double axis[3]
    cdef double diag[3]
    cdef int k, i
    if theta < _EPS_ANGLE:
        f = 1.0 + theta * theta / 6.0
        v[0] = f * wx
        v[1] = f * wy
        v[2] = f * wz
    elif theta > _PI - 1e-3:
        diag[0] = 0.5 * (R[0] + 1.0)
        diag[1] = 0.5 * (R[4] + 1.0)
        diag[2] = 0.5 * (R[8] + 1.0)
        k = 0
        if diag[1] > diag[k]:
            k = 1
        if diag[2] > diag[k]:
            k = 2
        mkk = diag[k]
        if mkk < 1e-30:
            mkk = 1e-30
        mkk = sqrt(mkk)
        for i in range(3):
            axis[i] = 0.5 * (R[3 * i + k] + (1.0 if i == k else 0.0)) / mkk
        n = sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2])
        for i in range(3):
            axis[i] /= n
        if axis[0] * wx + axis[1] * wy + axis[2] * wz < 0.0:
            for i in range(3):
                axis[i] = -axis[i]
        v[0] = theta * axis[0]
        v[1] = theta * axis[1]
        v[2] = theta * axis[2]
    else:
        f = theta / sin(theta)
        v[0] = f * wx
        v[1] = f * wy
        v[2] = f * wz


cdef inline double _geo(const double* a, const double* b) noexcept nogil:
    cdef double tr = 0.0
    cdef int i
    for i in range(9):
        tr += a[i] * b[i]
    cdef double c = (tr - 1.0) * 0.5
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    return acos(c)


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(v):
    """Axis-angle vectors (n, 3) -> rotations (n, 3, 3)."""
    cdef cnp.ndarray[double, ndim=2, mode="c"] vv = np.ascontiguousarray(
        v, dtype=np.float64
    ).reshape(-1, 3)
    cdef Py_ssize_t n = vv.shape[0], i
    cdef cnp.ndarray[double, ndim=3, mode="c"] out = np.empty((n, 3, 3))
    for i in range(n):
        _exp3(&vv[i, 0], &out[i, 0, 0])
    return out


def so3_log(R):
    """Rotations (n, 3, 3) -> axis-angle vectors (n, 3)."""
    cdef cnp.ndarray[double, ndim=3, mode="c"] RR = np.ascontiguousarray(
        R, dtype=np.float64
    ).reshape(-1, 3, 3)
    cdef Py_ssize_t n = RR.shape[0], i
    cdef cnp.ndarray[double, ndim=2, mode="c"] out = np.empty((n, 3))
    for i in range(n):
        _log3(&RR[i, 0, 0], &out[i, 0])
    return out


def geodesic_angles(Ra, Rb):
    """Pairwise geodesic distance of two (n, 3, 3) rotation batches."""
    cdef cnp.ndarray[double, ndim=3, mode="c"] A = np.ascontiguousarray(
        Ra, dtype=np.float64
    ).reshape(-1, 3, 3)
    cdef cnp.ndarray[double, ndim=3, mode="c"] B = np.ascontiguousarray(
        Rb, dtype=np.float64
    ).reshape(-1, 3, 3)
    cdef Py_ssize_t n = A.shape[0], i
    cdef cnp.ndarray[double, ndim=1, mode="c"] out = np.empty(n)
    for i in range(n):
        out[i] = _geo(&A[i, 0, 0], &B[i, 0, 0])
    return out


cdef double _objective(const double* samp, const cnp.uint8_t* kept, Py_ssize_t S,
                       const double* R) noexcept nogil:
    cdef double total = 0.0
    cdef Py_ssize_t s
    for s in range(S):
        if kept[s]:
            total += _geo(samp + 9 * s, R)
    return total


def weiszfeld_frames(samples, kept, R0, double eps_t, int max_iter):
    """Per-frame geodesic L1 averaging; see the fallback twin for semantics."""
    cdef cnp.ndarray[double, ndim=4, mode="c"] S4 = np.ascontiguousarray(
        samples, dtype=np.float64
    )
    cdef cnp.ndarray[cnp.uint8_t, ndim=2, mode="c"] K2 = np.ascontiguousarray(
        np.asarray(kept, dtype=bool), dtype=np.uint8
    )
    cdef cnp.ndarray[double, ndim=3, mode="c"] R = np.array(
        R0, dtype=np.float64, copy=True, order="C"
    )
    cdef Py_ssize_t F = S4.shape[0], S = S4.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] iters = np.zeros(F, dtype=np.int64)
    cdef cnp.ndarray[double, ndim=1] obj = np.zeros(F)
    cdef cnp.ndarray[double, ndim=2, mode="c"] hist = np.full(
        (F, max_iter + 1), np.nan
    )

    cdef double cur[9]
    cdef double rel[9]
    cdef double E[9]
    cdef double Rn[9]
    cdef double v[3]
    cdef double dv[3]
    cdef double num[3]
    cdef double wsum, n, obj_cur, cand, step
    cdef Py_ssize_t f, s, i
    cdef int it, h, accepted, count, pos

    for f in range(F):
        for i in range(9):
            cur[i] = R[f, i // 3, i % 3]
        obj_cur = _objective(&S4[f, 0, 0, 0], &K2[f, 0], S, cur)
        hist[f, 0] = obj_cur
        count = 0
        pos = 0
        for it in range(max_iter):
            wsum = 0.0
            num[0] = num[1] = num[2] = 0.0
            for s in range(S):
                if not K2[f, s]:
                    continue
                _mul_bt(&S4[f, s, 0, 0], cur, rel)
                _log3(rel, v)
                n = sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
                if n > _GUARD:
                    wsum += 1.0 / n
                    num[0] += v[0] / n
                    num[1] += v[1] / n
                    num[2] += v[2] / n
            if wsum <= 0.0:
                break
            dv[0] = num[0] / wsum
            dv[1] = num[1] / wsum
            dv[2] = num[2] / wsum
            accepted = 0
            for h in range(40):
                _exp3(dv, E)
                _mul(E, cur, Rn)
                cand = _objective(&S4[f, 0, 0, 0], &K2[f, 0], S, Rn)
                if cand <= obj_cur + _GUARD:
                    accepted = 1
                    break
                dv[0] *= 0.5
                dv[1] *= 0.5
                dv[2] *= 0.5
            if not accepted:
                _exp3(dv, E)
                _mul(E, cur, Rn)
                cand = _objective(&S4[f, 0, 0, 0], &K2[f, 0], S, Rn)
            step = sqrt(dv[0] * dv[0] + dv[1] * dv[1] + dv[2] * dv[2])
            if step > 0.0:
                for i in range(9):
                    cur[i] = Rn[i]
                obj_cur = cand
                count += 1
            pos += 1
            hist[f, pos] = obj_cur
            if step < eps_t:
                break
        for i in range(9):
            R[f, i // 3, i % 3] = cur[i]
        obj[f] = obj_cur
        iters[f] = count
    return R, iters, obj, hist


def solve_x_frames(rows, W2, T, double rho):
    """Per-frame 3x3 normal-equation solve; see the fallback twin."""
    cdef cnp.ndarray[double, ndim=3, mode="c"] Rb = np.ascontiguousarray(
        rows, dtype=np.float64
    )
    cdef cnp.ndarray[double, ndim=3, mode="c"] Wf = np.ascontiguousarray(
        W2, dtype=np.float64
    )
    cdef cnp.ndarray[double, ndim=3, mode="c"] Tf = np.ascontiguousarray(
        T, dtype=np.float64
    )
    cdef Py_ssize_t F = Rb.shape[0], P = Wf.shape[2]
    cdef cnp.ndarray[double, ndim=3, mode="c"] X = np.empty((F, 3, P))
    cdef double A[9]
    cdef double Inv[9]
    cdef double det, b0, b1, b2
    cdef double r0, r1, r2, r3, r4, r5
    cdef Py_ssize_t f, p
    for f in range(F):
        r0 = Rb[f, 0, 0]
        r1 = Rb[f, 0, 1]
        r2 = Rb[f, 0, 2]
        r3 = Rb[f, 1, 0]
        r4 = Rb[f, 1, 1]
        r5 = Rb[f, 1, 2]
        A[0] = r0 * r0 + r3 * r3 + rho
        A[1] = r0 * r1 + r3 * r4
        A[2] = r0 * r2 + r3 * r5
        A[3] = A[1]
        A[4] = r1 * r1 + r4 * r4 + rho
        A[5] = r1 * r2 + r4 * r5
        A[6] = A[2]
        A[7] = A[5]
        A[8] = r2 * r2 + r5 * r5 + rho
        det = (
            A[0] * (A[4] * A[8] - A[5] * A[7])
            - A[1] * (A[3] * A[8] - A[5] * A[6])
            + A[2] * (A[3] * A[7] - A[4] * A[6])
        )
        Inv[0] = (A[4] * A[8] - A[5] * A[7]) / det
        Inv[1] = (A[2] * A[7] - A[1] * A[8]) / det
        Inv[2] = (A[1] * A[5] - A[2] * A[4]) / det
        Inv[3] = (A[5] * A[6] - A[3] * A[8]) / det
        Inv[4] = (A[0] * A[8] - A[2] * A[6]) / det
        Inv[5] = (A[2] * A[3] - A[0] * A[5]) / det
        Inv[6] = (A[3] * A[7] - A[4] * A[6]) / det
        Inv[7] = (A[1] * A[6] - A[0] * A[7]) / det
        Inv[8] = (A[0] * A[4] - A[1] * A[3]) / det
        for p in range(P):
            b0 = r0 * Wf[f, 0, p] + r3 * Wf[f, 1, p] + rho * Tf[f, 0, p]
            b1 = r1 * Wf[f, 0, p] + r4 * Wf[f, 1, p] + rho * Tf[f, 1, p]
            b2 = r2 * Wf[f, 0, p] + r5 * Wf[f, 1, p] + rho * Tf[f, 2, p]
            X[f, 0, p] = Inv[0] * b0 + Inv[1] * b1 + Inv[2] * b2
            X[f, 1, p] = Inv[3] * b0 + Inv[4] * b1 + Inv[5] * b2
            X[f, 2, p] = Inv[6] * b0 + Inv[7] * b1 + Inv[8] * b2
    return X
