"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``TOKENATTACK_DISABLE_NUMBA`` is unset or falsy.  Both paths are
always importable as ``numpy_impl.<name>`` / ``numba_impl.<name>`` so tests
and the benchmark can compare them directly.

All 2-D kernels take ``(rows, d)`` arrays; callers reshape.
"""

import math
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _flag_disabled():
    return os.environ.get("TOKENATTACK_DISABLE_NUMBA", "").strip().lower() in (
        "1",
        "true",
        "yes",
        "on",
    )


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------- numpy path


def _np_gelu_fwd(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)


def _np_gelu_bwd(x, dy):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (dy * (0.5 * (1.0 + t) + 0.5 * x * dt)).astype(x.dtype, copy=False)


def _np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def _np_layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_bwd(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / d
    return rstd[:, None] * (dxhat - m1 - xhat * m2)


def _np_block_l2(pixmap, q):
    c, h, w = pixmap.shape
    g = pixmap.astype(np.float64).reshape(c, h // q, q, w // q, q)
    acc = np.zeros((h // q, w // q))
    # channel, row, column accumulation order, so both paths agree bit for bit
    for ch in range(c):
        for dy in range(q):
            for dx in range(q):
                v = g[ch, :, dy, :, dx]
                acc += v * v
    return np.sqrt(acc).reshape(-1)


def _np_project(x_adv, x_orig, mask, lo, hi):
    out = np.minimum(np.maximum(x_adv, lo), hi)
    return np.where(mask, out, x_orig)


numpy_impl = SimpleNamespace(
    gelu_fwd=_np_gelu_fwd,
    gelu_bwd=_np_gelu_bwd,
    softmax_fwd=_np_softmax_fwd,
    softmax_bwd=_np_softmax_bwd,
    layernorm_fwd=_np_layernorm_fwd,
    layernorm_bwd=_np_layernorm_bwd,
    block_l2=_np_block_l2,
    project=_np_project,
)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _nb_softmax_bwd(y, dy):
        rows, d = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for j in range(d):
                s += dy[r, j] * y[r, j]
            for j in range(d):
                out[r, j] = y[r, j] * (dy[r, j] - s)
        return out

    @njit(cache=True)
    def _nb_layernorm_fwd(x, gamma, beta, eps):
        rows, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            s = 0.0
            for j in range(d):
                s += x[r, j]
            mean = s / d
            v = 0.0
            for j in range(d):
                c = x[r, j] - mean
                v += c * c
            inv = 1.0 / math.sqrt(v / d + eps)
            rstd[r] = inv
            for j in range(d):
                h = (x[r, j] - mean) * inv
                xhat[r, j] = h
                out[r, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(dy, xhat, rstd, gamma):
        rows, d = dy.shape
        out = np.empty_like(dy)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[r, j] * gamma[j]
                m1 += g
                m2 += g * xhat[r, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                out[r, j] = rstd[r] * (dy[r, j] * gamma[j] - m1 - xhat[r, j] * m2)
        return out

    @njit(cache=True)
    def _nb_block_l2(pixmap, q):
        c, h, w = pixmap.shape
        bw = w // q
        out = np.zeros((h // q) * bw, dtype=np.float64)
        for ch in range(c):
            for y in range(h):
                for x in range(w):
                    v = np.float64(pixmap[ch, y, x])
                    out[(y // q) * bw + x // q] += v * v
        return np.sqrt(out)

    @njit(cache=True)
    def _nb_project(x_adv, x_orig, mask, lo, hi):
        fa = x_adv.ravel()
        fo = x_orig.ravel()
        fm = mask.ravel()
        fl = lo.ravel()
        fh = hi.ravel()
        out = np.empty_like(fa)
        for i in range(fa.size):
            if fm[i]:
                v = fa[i]
                if v < fl[i]:
                    v = fl[i]
                if v > fh[i]:
                    v = fh[i]
                out[i] = v
            else:
                out[i] = fo[i]
        return out.reshape(x_adv.shape)

    # Transcendental elementwise kernels stay on numpy: its SIMD tanh/exp
    # beat a scalar-loop JIT by 2-10x (see benchmarks/bench_kernels.py).
    numba_impl = SimpleNamespace(
        gelu_fwd=_np_gelu_fwd,
        gelu_bwd=_np_gelu_bwd,
        softmax_fwd=_np_softmax_fwd,
        softmax_bwd=_nb_softmax_bwd,
        layernorm_fwd=_nb_layernorm_fwd,
        layernorm_bwd=_nb_layernorm_bwd,
        block_l2=_nb_block_l2,
        project=_nb_project,
    )
else:  # pragma: no cover
    numba_impl = None


def active():
    """Return the kernel namespace selected at import time."""
    return numba_impl if USE_NUMBA else numpy_impl


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
