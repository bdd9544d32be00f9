"""Numba @njit twins of the numpy kernels.

Loop bodies compute the same quantities as the numpy reference; inner
loops run over contiguous memory so they vectorize.  No fastmath: results
must be deterministic.  prange is only used where each thread writes a
disjoint output slice.
"""

import numpy as np
import numba
from numba import njit, prange

# workqueue is always available and keeps thread scheduling self-contained
# (the parallel loops here only ever write disjoint slices).
numba.config.THREADING_LAYER = "workqueue"


@njit(cache=True, parallel=True)
def _timeconv_fwd_inner(x2, kt, bias, L):
    # x2: (B*F*L, C) rows, kt: (k, O, C) transposed kernel, out: (B*F*L, O)
    k = kt.shape[0]
    O = kt.shape[1]
    C = kt.shape[2]
    h = k // 2
    n = x2.shape[0]
    out = np.empty((n, O), dtype=np.float64)
    for row in prange(n):
        l = row % L
        for o in range(O):
            acc = bias[o]
            for d in range(k):
                ls = l + d - h
                if 0 <= ls < L:
                    src = row + (d - h)
                    for c in range(C):
                        acc += x2[src, c] * kt[d, o, c]
            out[row, o] = acc
    return out


def timeconv_fwd(x, kern, bias):
    B, F, L, C = x.shape
    kt = np.ascontiguousarray(np.transpose(kern, (0, 2, 1)))
    x2 = x.reshape(B * F * L, C)
    out = _timeconv_fwd_inner(x2, kt, bias, L)
    return out.reshape(B, F, L, kern.shape[2])


@njit(cache=True, parallel=True)
def _timeconv_bwd_x_inner(gy2, kern, L):
    # gy2: (B*F*L, O), kern: (k, C, O); gx[l] += gy[l - (d-h)] @ kern[d].T
    k = kern.shape[0]
    C = kern.shape[1]
    O = kern.shape[2]
    h = k // 2
    n = gy2.shape[0]
    gx = np.empty((n, C), dtype=np.float64)
    for row in prange(n):
        l = row % L
        for c in range(C):
            acc = 0.0
            for d in range(k):
                lg = l - (d - h)
                if 0 <= lg < L:
                    src = row - (d - h)
                    for o in range(O):
                        acc += gy2[src, o] * kern[d, c, o]
            gx[row, c] = acc
    return gx


def timeconv_bwd_x(gy, kern):
    B, F, L, O = gy.shape
    gy2 = gy.reshape(B * F * L, O)
    gx = _timeconv_bwd_x_inner(gy2, kern, L)
    return gx.reshape(B, F, L, kern.shape[1])


@njit(cache=True, parallel=True)
def _timeconv_bwd_k_inner(x2, gy2, k, L):
    n, C = x2.shape
    O = gy2.shape[1]
    h = k // 2
    gk = np.zeros((k, C, O), dtype=np.float64)
    for c in prange(C):
        for d in range(k):
            off = d - h
            for row in range(n):
                ls = row % L + off
                if 0 <= ls < L:
                    xv = x2[row + off, c]
                    for o in range(O):
                        gk[d, c, o] += xv * gy2[row, o]
    gb = np.zeros(O, dtype=np.float64)
    for row in range(n):
        for o in range(O):
            gb[o] += gy2[row, o]
    return gk, gb


def timeconv_bwd_k(x, gy, k):
    B, F, L, C = x.shape
    x2 = x.reshape(B * F * L, C)
    gy2 = gy.reshape(B * F * L, gy.shape[3])
    return _timeconv_bwd_k_inner(x2, gy2, k, L)


@njit(cache=True, parallel=True)
def _dwconv_fwd_inner(x2, taps, bias, L):
    k, C = taps.shape
    h = k // 2
    n = x2.shape[0]
    y = np.empty((n, C), dtype=np.float64)
    for row in prange(n):
        l = row % L
        for c in range(C):
            acc = bias[c]
            for d in range(k):
                ls = l + d - h
                if 0 <= ls < L:
                    acc += x2[row + (d - h), c] * taps[d, c]
            y[row, c] = acc
    return y


def dwconv_fwd(x, taps, bias):
    B, F, L, C = x.shape
    y = _dwconv_fwd_inner(x.reshape(B * F * L, C), taps, bias, L)
    return y.reshape(B, F, L, C)


@njit(cache=True, parallel=True)
def _dwconv_bwd_x_inner(gy2, taps, L):
    k, C = taps.shape
    h = k // 2
    n = gy2.shape[0]
    gx = np.empty((n, C), dtype=np.float64)
    for row in prange(n):
        l = row % L
        for c in range(C):
            acc = 0.0
            for d in range(k):
                lg = l - (d - h)
                if 0 <= lg < L:
                    acc += gy2[row - (d - h), c] * taps[d, c]
            gx[row, c] = acc
    return gx


def dwconv_bwd_x(gy, taps):
    B, F, L, C = gy.shape
    gx = _dwconv_bwd_x_inner(gy.reshape(B * F * L, C), taps, L)
    return gx.reshape(B, F, L, C)


@njit(cache=True, parallel=True)
def _dwconv_bwd_k_inner(x2, gy2, k, L):
    n, C = x2.shape
    h = k // 2
    gt = np.zeros((k, C), dtype=np.float64)
    gb = np.zeros(C, dtype=np.float64)
    for c in prange(C):
        for row in range(n):
            gv = gy2[row, c]
            gb[c] += gv
            l = row % L
            for d in range(k):
                ls = l + d - h
                if 0 <= ls < L:
                    gt[d, c] += x2[row + (d - h), c] * gv
    return gt, gb


def dwconv_bwd_k(x, gy, k):
    B, F, L, C = x.shape
    return _dwconv_bwd_k_inner(
        x.reshape(B * F * L, C), gy.reshape(B * F * L, C), k, L
    )


@njit(cache=True, parallel=True)
def _silu_fwd_flat(xf):
    out = np.empty_like(xf)
    for i in prange(xf.size):
        out[i] = xf[i] / (1.0 + np.exp(-xf[i]))
    return out


def silu_fwd(x):
    return _silu_fwd_flat(np.ascontiguousarray(x).reshape(x.size)).reshape(x.shape)


@njit(cache=True, parallel=True)
def _silu_bwd_flat(xf, gf):
    out = np.empty_like(xf)
    for i in prange(xf.size):
        s = 1.0 / (1.0 + np.exp(-xf[i]))
        out[i] = gf[i] * (s * (1.0 + xf[i] * (1.0 - s)))
    return out


def silu_bwd(x, gy):
    return _silu_bwd_flat(
        np.ascontiguousarray(x).reshape(x.size),
        np.ascontiguousarray(gy).reshape(gy.size),
    ).reshape(x.shape)


@njit(cache=True, parallel=True)
def _glu_fwd_flat(af, gf):
    out = np.empty_like(af)
    for i in prange(af.size):
        out[i] = af[i] / (1.0 + np.exp(-gf[i]))
    return out


def glu_fwd(a, g):
    return _glu_fwd_flat(
        np.ascontiguousarray(a).reshape(a.size),
        np.ascontiguousarray(g).reshape(g.size),
    ).reshape(a.shape)


@njit(cache=True, parallel=True)
def _glu_bwd_flat(af, gf, gyf):
    ga = np.empty_like(af)
    gg = np.empty_like(af)
    for i in prange(af.size):
        s = 1.0 / (1.0 + np.exp(-gf[i]))
        ga[i] = gyf[i] * s
        gg[i] = gyf[i] * af[i] * s * (1.0 - s)
    return ga, gg


def glu_bwd(a, g, gy):
    ga, gg = _glu_bwd_flat(
        np.ascontiguousarray(a).reshape(a.size),
        np.ascontiguousarray(g).reshape(g.size),
        np.ascontiguousarray(gy).reshape(gy.size),
    )
    return ga.reshape(a.shape), gg.reshape(a.shape)


@njit(cache=True, parallel=True)
def _adam_ema_flat(pf, gf, mf, vf, ef, step, lr, beta1, beta2, eps, decay):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in prange(pf.size):
        mf[i] = mf[i] * beta1 + (1.0 - beta1) * gf[i]
        vf[i] = vf[i] * beta2 + (1.0 - beta2) * (gf[i] * gf[i])
        pf[i] -= lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)
        ef[i] = ef[i] * decay + (1.0 - decay) * pf[i]


def adam_ema_step(p, g, m, v, ema, step, lr, beta1, beta2, eps, decay):
    _adam_ema_flat(p.reshape(p.size), g.reshape(g.size), m.reshape(m.size),
                   v.reshape(v.size), ema.reshape(ema.size),
                   step, lr, beta1, beta2, eps, decay)


@njit(cache=True, parallel=True)
def em_step(x, y, noise, gamma_dt, g_sqrt_dt):
    P, n = x.shape
    for p in prange(P):
        for i in range(n):
            x[p, i] += gamma_dt * (y[i] - x[p, i]) + g_sqrt_dt * noise[p, i]


@njit(cache=True)
def overlap_add(frames, hop, out_len):
    L, W = frames.shape
    out = np.zeros(out_len, dtype=np.float64)
    for l in range(L):
        base = l * hop
        for n in range(W):
            out[base + n] += frames[l, n]
    return out
