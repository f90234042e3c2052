# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrent graph kernels (same contract as ``_kernels_py``).

Pre-activations are accumulated row-wise in a fixed order: hidden terms
over ``k``, then input terms over ``d``, then the bias.  The build disables
FMA contraction so this order is the one that actually executes.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp

cnp.import_array()

NAME = "cython"


cdef inline double _sig(double z) noexcept nogil:
    return 1.0 / (1.0 + exp(-z))


cdef inline void _axpy(Py_ssize_t n, double a, const double* x, double* y) noexcept nogil:
    # y[r] += x[r] * a, each y[r] accumulated in call order
    cdef Py_ssize_t r
    for r in range(n):
        y[r] += x[r] * a


cdef inline double _dot(Py_ssize_t n, const double* x, const double* y) noexcept nogil:
    cdef Py_ssize_t r
    cdef double acc = 0.0
    for r in range(n):
        acc += x[r] * y[r]
    return acc


def forward(double[:, ::1] Ut, double[:, ::1] Vt, double[::1] b,
            double[:, ::1] Uqt, double[::1] bq, double[::1] wy, double by,
            cnp.intp_t[::1] indptr, cnp.intp_t[::1] src, double[::1] w,
            double[:, :, ::1] X, double[:, ::1] h0, double[:, ::1] c0,
            mask=None, bint cache=False):
    cdef Py_ssize_t T = X.shape[0], N = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t H = h0.shape[1], G = 4 * H
    cdef Py_ssize_t t, i, j, k, r, d, e
    cdef bint has_edges = src.shape[0] > 0
    cdef bint use_mask = mask is not None
    cdef double[:, ::1] m
    if use_mask:
        m = np.ascontiguousarray(mask, dtype=np.float64)

    hs_a = np.empty((T + 1, N, H))
    cs_a = np.empty((T + 1, N, H))
    y_a = np.empty((T, N))
    cdef double[:, :, ::1] hs = hs_a
    cdef double[:, :, ::1] cs = cs_a
    cdef double[:, ::1] y = y_a
    hs[0, :, :] = h0
    cs[0, :, :] = c0

    cdef Py_ssize_t Tc = T if cache else 1
    gates_a = np.empty((Tc, N, G))
    qs_a = np.zeros((Tc, N, H))
    as_a = np.empty((Tc, N, H))
    tcs_a = np.empty((Tc, N, H))
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, :, ::1] qs = qs_a
    cdef double[:, :, ::1] As = as_a
    cdef double[:, :, ::1] tcs = tcs_a

    z_a = np.empty(G)
    hm_a = np.empty(H)
    q_a = np.zeros((N, H))
    a_a = np.empty(H)
    cdef double[::1] z = z_a
    cdef double[::1] hm = hm_a
    cdef double[:, ::1] q = q_a
    cdef double[::1] av = a_a
    cdef double acc, hk, xd, wgt, c, tc, fgv, igv, ogv, cbv, h
    cdef Py_ssize_t tt

    with nogil:
        for t in range(T):
            tt = t if cache else 0
            if has_edges:
                for j in range(N):
                    for r in range(H):
                        z[r] = 0.0
                    for k in range(H):
                        _axpy(H, hs[t, j, k], &Uqt[k, 0], &z[0])
                    for r in range(H):
                        q[j, r] = tanh(z[r] + bq[r])
            for i in range(N):
                if use_mask:
                    for k in range(H):
                        hm[k] = hs[t, i, k] * m[i, k]
                else:
                    for k in range(H):
                        hm[k] = hs[t, i, k]
                for r in range(G):
                    z[r] = 0.0
                for k in range(H):
                    _axpy(G, hm[k], &Ut[k, 0], &z[0])
                for d in range(D):
                    _axpy(G, X[t, i, d], &Vt[d, 0], &z[0])
                for r in range(G):
                    z[r] += b[r]
                for k in range(H):
                    av[k] = cs[t, i, k]
                if has_edges:
                    for e in range(indptr[i], indptr[i + 1]):
                        j = src[e]
                        wgt = w[e]
                        for k in range(H):
                            av[k] += wgt * q[j, k]
                acc = 0.0
                for k in range(H):
                    cbv = tanh(z[k])
                    fgv = _sig(z[H + k])
                    igv = _sig(z[2 * H + k])
                    ogv = _sig(z[3 * H + k])
                    c = fgv * av[k] + igv * cbv
                    tc = tanh(c)
                    h = ogv * tc
                    cs[t + 1, i, k] = c
                    hs[t + 1, i, k] = h
                    acc += wy[k] * h
                    if cache:
                        gates[tt, i, k] = cbv
                        gates[tt, i, H + k] = fgv
                        gates[tt, i, 2 * H + k] = igv
                        gates[tt, i, 3 * H + k] = ogv
                        As[tt, i, k] = av[k]
                        tcs[tt, i, k] = tc
                        if has_edges:
                            qs[tt, i, k] = q[i, k]
                y[t, i] = acc + by
    if cache:
        return y_a, hs_a, cs_a, (gates_a, qs_a, as_a, tcs_a)
    return y_a, hs_a, cs_a, None


def backward(double[:, ::1] Ut, double[:, ::1] Vt, double[::1] b,
             double[:, ::1] Uqt, double[::1] bq, double[::1] wy, double by,
             cnp.intp_t[::1] indptr, cnp.intp_t[::1] src, double[::1] w,
             double[:, :, ::1] X, mask, double[:, :, ::1] hs, double[:, :, ::1] cs,
             cache, double[:, ::1] dY):
    cdef double[:, :, ::1] gates = cache[0]
    cdef double[:, :, ::1] qs = cache[1]
    cdef double[:, :, ::1] As = cache[2]
    cdef double[:, :, ::1] tcs = cache[3]
    cdef Py_ssize_t T = X.shape[0], N = X.shape[1], D = X.shape[2]
    cdef Py_ssize_t H = hs.shape[2], G = 4 * H
    cdef Py_ssize_t t, i, j, k, r, d, e
    cdef bint has_edges = src.shape[0] > 0
    cdef bint use_mask = mask is not None
    cdef double[:, ::1] m
    if use_mask:
        m = np.ascontiguousarray(mask, dtype=np.float64)

    dUt_a = np.zeros((H, G))
    dVt_a = np.zeros((D, G))
    db_a = np.zeros(G)
    dUqt_a = np.zeros((H, H))
    dbq_a = np.zeros(H)
    dwy_a = np.zeros(H)
    cdef double[:, ::1] dUt = dUt_a
    cdef double[:, ::1] dVt = dVt_a
    cdef double[::1] db = db_a
    cdef double[:, ::1] dUqt = dUqt_a
    cdef double[::1] dbq = dbq_a
    cdef double[::1] dwy = dwy_a
    cdef double dby = 0.0

    dhn_a = np.zeros((N, H))
    dcn_a = np.zeros((N, H))
    dhp_a = np.zeros((N, H))
    dcp_a = np.zeros((N, H))
    dq_a = np.zeros((N, H))
    dz_a = np.empty(G)
    hm_a = np.empty(H)
    cdef double[:, ::1] dh_next = dhn_a
    cdef double[:, ::1] dc_next = dcn_a
    cdef double[:, ::1] dh_prev = dhp_a
    cdef double[:, ::1] dc_prev = dcp_a
    cdef double[:, ::1] dq = dq_a
    cdef double[::1] dz = dz_a
    cdef double[::1] hm = hm_a
    cdef double dyt, dh, dc, cbv, fgv, igv, ogv, tc, acc, hk, xd, g, wgt, qv
    cdef double[:, ::1] swap

    with nogil:
        for t in range(T - 1, -1, -1):
            for i in range(N):
                for k in range(H):
                    dh_prev[i, k] = 0.0
                    dq[i, k] = 0.0
            for i in range(N):
                dyt = dY[t, i]
                dby += dyt
                for k in range(H):
                    dwy[k] += dyt * hs[t + 1, i, k]
                for k in range(H):
                    dh = dh_next[i, k] + dyt * wy[k]
                    cbv = gates[t, i, k]
                    fgv = gates[t, i, H + k]
                    igv = gates[t, i, 2 * H + k]
                    ogv = gates[t, i, 3 * H + k]
                    tc = tcs[t, i, k]
                    dc = dc_next[i, k] + dh * ogv * (1.0 - tc * tc)
                    dz[k] = dc * igv * (1.0 - cbv * cbv)
                    dz[H + k] = dc * As[t, i, k] * fgv * (1.0 - fgv)
                    dz[2 * H + k] = dc * cbv * igv * (1.0 - igv)
                    dz[3 * H + k] = dh * tc * ogv * (1.0 - ogv)
                    dc_prev[i, k] = dc * fgv
                if use_mask:
                    for k in range(H):
                        hm[k] = hs[t, i, k] * m[i, k]
                else:
                    for k in range(H):
                        hm[k] = hs[t, i, k]
                for k in range(H):
                    _axpy(G, hm[k], &dz[0], &dUt[k, 0])
                    acc = _dot(G, &Ut[k, 0], &dz[0])
                    if use_mask:
                        acc = acc * m[i, k]
                    dh_prev[i, k] += acc
                for d in range(D):
                    _axpy(G, X[t, i, d], &dz[0], &dVt[d, 0])
                for r in range(G):
                    db[r] += dz[r]
                if has_edges:
                    for e in range(indptr[i], indptr[i + 1]):
                        j = src[e]
                        wgt = w[e]
                        for k in range(H):
                            dq[j, k] += wgt * dc_prev[i, k]
            if has_edges:
                for j in range(N):
                    for r in range(H):
                        qv = qs[t, j, r]
                        dz[r] = dq[j, r] * (1.0 - qv * qv)
                        dbq[r] += dz[r]
                    for k in range(H):
                        _axpy(H, hs[t, j, k], &dz[0], &dUqt[k, 0])
                        dh_prev[j, k] += _dot(H, &Uqt[k, 0], &dz[0])
            swap = dh_next
            dh_next = dh_prev
            dh_prev = swap
            swap = dc_next
            dc_next = dc_prev
            dc_prev = swap
    return dUt_a, dVt_a, db_a, dUqt_a, dbq_a, dwy_a, dby
