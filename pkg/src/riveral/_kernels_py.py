"""Pure-Python (numpy) recurrent graph kernels.

Layout shared with the compiled core:

* gate pre-activations are stacked ``[candidate, forget, input, output]`` so
  ``Ut`` is ``(H, 4H)``, ``Vt`` is ``(D, 4H)`` and ``b`` is ``(4H,)``;
* ``Uqt`` is ``(H, H)`` (transposed) for the transferred variables;
* incoming edges are CSR ``(indptr, src, w)`` over destination segments.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _dense_in(n, indptr, src, w):
    W = np.zeros((n, n))
    for j in range(n):
        for e in range(indptr[j], indptr[j + 1]):
            W[src[e], j] += w[e]
    return W


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def forward(Ut, Vt, b, Uqt, bq, wy, by, indptr, src, w, X, h0, c0, mask=None, cache=False):
    T, N, _ = X.shape
    H = h0.shape[1]
    has_edges = len(src) > 0
    W = _dense_in(N, indptr, src, w) if has_edges else None
    hs = np.empty((T + 1, N, H))
    cs = np.empty((T + 1, N, H))
    hs[0] = h0
    cs[0] = c0
    y = np.empty((T, N))
    if cache:
        gates = np.empty((T, N, 4 * H))
        qs = np.zeros((T, N, H))
        As = np.empty((T, N, H))
        tcs = np.empty((T, N, H))
    for t in range(T):
        hprev = hs[t]
        hm = hprev * mask if mask is not None else hprev
        z = hm @ Ut + X[t] @ Vt + b
        cb = np.tanh(z[:, :H])
        fg = _sigmoid(z[:, H:2 * H])
        ig = _sigmoid(z[:, 2 * H:3 * H])
        og = _sigmoid(z[:, 3 * H:])
        if has_edges:
            q = np.tanh(hprev @ Uqt + bq)
            a = cs[t] + W.T @ q
        else:
            a = cs[t]
        c = fg * a + ig * cb
        tc = np.tanh(c)
        h = og * tc
        hs[t + 1] = h
        cs[t + 1] = c
        y[t] = h @ wy + by
        if cache:
            gates[t, :, :H] = cb
            gates[t, :, H:2 * H] = fg
            gates[t, :, 2 * H:3 * H] = ig
            gates[t, :, 3 * H:] = og
            if has_edges:
                qs[t] = q
            As[t] = a
            tcs[t] = tc
    if cache:
        return y, hs, cs, (gates, qs, As, tcs)
    return y, hs, cs, None


def backward(Ut, Vt, b, Uqt, bq, wy, by, indptr, src, w, X, mask, hs, cs, cache, dY):
    gates, qs, As, tcs = cache
    T, N, D = X.shape
    H = hs.shape[2]
    has_edges = len(src) > 0
    W = _dense_in(N, indptr, src, w) if has_edges else None
    dUt = np.zeros_like(Ut)
    dVt = np.zeros_like(Vt)
    db = np.zeros_like(b)
    dUqt = np.zeros_like(Uqt)
    dbq = np.zeros_like(bq)
    dwy = np.zeros_like(wy)
    dby = 0.0
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    dz = np.empty((N, 4 * H))
    for t in range(T - 1, -1, -1):
        dyt = dY[t]
        h = hs[t + 1]
        dwy += dyt @ h
        dby += dyt.sum()
        dh = dh_next + dyt[:, None] * wy[None, :]
        cb = gates[t, :, :H]
        fg = gates[t, :, H:2 * H]
        ig = gates[t, :, 2 * H:3 * H]
        og = gates[t, :, 3 * H:]
        tc = tcs[t]
        dc = dc_next + dh * og * (1.0 - tc * tc)
        dz[:, :H] = dc * ig * (1.0 - cb * cb)
        dz[:, H:2 * H] = dc * As[t] * fg * (1.0 - fg)
        dz[:, 2 * H:3 * H] = dc * cb * ig * (1.0 - ig)
        dz[:, 3 * H:] = dh * tc * og * (1.0 - og)
        hprev = hs[t]
        hm = hprev * mask if mask is not None else hprev
        dUt += hm.T @ dz
        dVt += X[t].T @ dz
        db += dz.sum(axis=0)
        dh_prev = dz @ Ut.T
        if mask is not None:
            dh_prev *= mask
        da = dc * fg
        if has_edges:
            q = qs[t]
            dzq = (W @ da) * (1.0 - q * q)
            dUqt += hprev.T @ dzq
            dbq += dzq.sum(axis=0)
            dh_prev += dzq @ Uqt.T
        dh_next = dh_prev
        dc_next = da
    return dUt, dVt, db, dUqt, dbq, dwy, dby
