"""Standard LSTM cells written independently of the package kernels.

``lstm_step_scalar`` uses Python floats and ``math`` (accumulating each
pre-activation as hidden terms, then input terms, then bias).
``lstm_step_numpy`` is the textbook batched matrix form.
"""
import math

import numpy as np


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_step_scalar(P, h, c, x):
    """P maps U_c/V_c/b_c ... U_o/V_o/b_o to nested lists; h, c, x per segment."""
    H = len(h)
    pre = {}
    for g in "cfgo":
        U, V, b = P[f"U_{g}"], P[f"V_{g}"], P[f"b_{g}"]
        rows = []
        for r in range(H):
            acc = 0.0
            for k in range(H):
                acc += U[r][k] * h[k]
            for d in range(len(x)):
                acc += V[r][d] * x[d]
            acc += b[r]
            rows.append(acc)
        pre[g] = rows
    c_new, h_new = [], []
    for r in range(H):
        cand = math.tanh(pre["c"][r])
        f, i, o = _sig(pre["f"][r]), _sig(pre["g"][r]), _sig(pre["o"][r])
        cr = f * c[r] + i * cand
        c_new.append(cr)
        h_new.append(o * math.tanh(cr))
    return h_new, c_new


def lstm_step_numpy(P, h, c, x):
    """Batched over rows of ``h``/``c``/``x``."""
    def pre(g):
        U = np.concatenate([P[f"U_{k}"].T for k in "cfgo"], axis=1)
        V = np.concatenate([P[f"V_{k}"].T for k in "cfgo"], axis=1)
        b = np.concatenate([P[f"b_{k}"] for k in "cfgo"])
        return h @ U + x @ V + b

    z = pre(None)
    H = h.shape[1]
    cand = np.tanh(z[:, :H])
    f = 1.0 / (1.0 + np.exp(-z[:, H:2 * H]))
    i = 1.0 / (1.0 + np.exp(-z[:, 2 * H:3 * H]))
    o = 1.0 / (1.0 + np.exp(-z[:, 3 * H:]))
    c_new = f * c + i * cand
    return o * np.tanh(c_new), c_new


def head(P, h):
    return [sum(P["W_y"][0][k] * h[k] for k in range(len(h))) + P["b_y"][0]]
