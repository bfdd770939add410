"""Row-wise numeric kernels with a numba path and a pure-numpy path.

Every kernel takes 2-D C-contiguous arrays (rows x features) and returns new
arrays. The numba versions are compiled lazily on first call and cached on
disk. Set ``HYPERDAS_NUMBA=0`` to force the numpy path, e.g. when comparing
backends or on platforms without numba.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("HYPERDAS_NUMBA", "1") != "0"

GELU_K = math.sqrt(2.0 / math.pi)
GELU_C = 0.044715


# ----------------------------------------------------------------------------
# numpy reference path
# ----------------------------------------------------------------------------

def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def log_softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd_np(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def rms_norm_fwd_np(x, gain, eps):
    rstd = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    xhat = x * rstd
    return xhat * gain, xhat, rstd[:, 0]


def rms_norm_bwd_np(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - xhat * m2)
    return dx, (dy * xhat).sum(axis=0)


def gelu_fwd_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_K * (x + GELU_C * x ** 3)))


def gelu_bwd_np(x, dy):
    t = np.tanh(GELU_K * (x + GELU_C * x ** 3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
    return dy * d


def snap_np(g):
    """Double argmax over a B x (C+1) score grid; last column is SELF."""
    n_rows, n_cols = g.shape
    n_cf = n_cols - 1
    out = np.zeros_like(g)
    if n_cf > 0:
        cf = g[:, :n_cf]
        row_best = np.argmax(g, axis=1)
        col_best = np.argmax(cf, axis=0)
        rows = np.arange(n_rows)
        hit = row_best < n_cf
        hit &= col_best[np.minimum(row_best, n_cf - 1)] == rows
        out[rows[hit], row_best[hit]] = 1.0
    out[:, n_cf] = (out[:, :n_cf].sum(axis=1) == 0).astype(g.dtype)
    return out


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------

if NUMBA_AVAILABLE:
    _jit = numba.njit(cache=True, fastmath=False)

    @_jit
    def softmax_fwd_nb(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = math.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @_jit
    def softmax_bwd_nb(y, dy):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += dy[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (dy[i, j] - s)
        return out

    @_jit
    def log_softmax_fwd_nb(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                s += math.exp(x[i, j] - mx)
            lse = math.log(s)
            for j in range(m):
                out[i, j] = x[i, j] - mx - lse
        return out

    @_jit
    def layer_norm_fwd_nb(x, gain, bias, eps):
        n, m = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                c = x[i, j] - mu
                var += c * c
            r = 1.0 / math.sqrt(var / m + eps)
            rstd[i] = r
            for j in range(m):
                xh = (x[i, j] - mu) * r
                xhat[i, j] = xh
                out[i, j] = xh * gain[j] + bias[j]
        return out, xhat, rstd

    @_jit
    def layer_norm_bwd_nb(dy, xhat, rstd, gain):
        n, m = dy.shape
        dx = np.empty_like(dy)
        dg = np.zeros(m, dtype=dy.dtype)
        db = np.zeros(m, dtype=dy.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(m):
                d = dy[i, j] * gain[j]
                m1 += d
                m2 += d * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            m1 /= m
            m2 /= m
            for j in range(m):
                dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
        return dx, dg, db

    @_jit
    def rms_norm_fwd_nb(x, gain, eps):
        n, m = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            ss = 0.0
            for j in range(m):
                ss += x[i, j] * x[i, j]
            r = 1.0 / math.sqrt(ss / m + eps)
            rstd[i] = r
            for j in range(m):
                xh = x[i, j] * r
                xhat[i, j] = xh
                out[i, j] = xh * gain[j]
        return out, xhat, rstd

    @_jit
    def rms_norm_bwd_nb(dy, xhat, rstd, gain):
        n, m = dy.shape
        dx = np.empty_like(dy)
        dg = np.zeros(m, dtype=dy.dtype)
        for i in range(n):
            m2 = 0.0
            for j in range(m):
                m2 += dy[i, j] * gain[j] * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
            m2 /= m
            for j in range(m):
                dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - xhat[i, j] * m2)
        return dx, dg

    @_jit
    def gelu_fwd_nb(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + math.tanh(GELU_K * (v + GELU_C * v * v * v)))
        return out

    @_jit
    def gelu_bwd_nb(x, dy):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                t = math.tanh(GELU_K * (v + GELU_C * v * v * v))
                d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
                out[i, j] = dy[i, j] * d
        return out

    @_jit
    def snap_nb(g):
        n_rows, n_cols = g.shape
        n_cf = n_cols - 1
        out = np.zeros_like(g)
        col_best = np.zeros(max(n_cf, 1), dtype=np.int64)
        for c in range(n_cf):
            best = 0
            for b in range(1, n_rows):
                if g[b, c] > g[best, c]:
                    best = b
            col_best[c] = best
        for b in range(n_rows):
            best = 0
            for c in range(1, n_cols):
                if g[b, c] > g[b, best]:
                    best = c
            if best < n_cf and col_best[best] == b:
                out[b, best] = 1.0
            else:
                out[b, n_cf] = 1.0
        return out


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
log_softmax_fwd = _pick("log_softmax_fwd")
layer_norm_fwd = _pick("layer_norm_fwd")
layer_norm_bwd = _pick("layer_norm_bwd")
rms_norm_fwd = _pick("rms_norm_fwd")
rms_norm_bwd = _pick("rms_norm_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
snap_kernel = _pick("snap")
