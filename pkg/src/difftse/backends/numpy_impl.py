"""Pure-numpy reference implementations of the hot kernels.

Shapes follow the network layout used throughout the package: feature maps
are (batch, freq, frames, channels) float64 arrays with channels last, so
channel mixing is a single BLAS matmul.
"""

import numpy as np


def timeconv_fwd(x, kern, bias):
    """Local mixing along the frame axis.

    x: (B, F, L, C), kern: (k, C, O), bias: (O,).  Tap d reads frame
    l + d - k//2 with zero padding outside [0, L).
    """
    B, F, L, C = x.shape
    k, _, O = kern.shape
    h = k // 2
    y = np.empty((B, F, L, O), dtype=np.float64)
    y[...] = bias
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        y[:, :, lo:hi, :] += np.tensordot(
            x[:, :, lo + off:hi + off, :], kern[d], axes=([3], [0])
        )
    return y


def timeconv_bwd_x(gy, kern):
    """Gradient of timeconv_fwd w.r.t. its input."""
    B, F, L, O = gy.shape
    k, C, _ = kern.shape
    h = k // 2
    gx = np.zeros((B, F, L, C), dtype=np.float64)
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        gx[:, :, lo + off:hi + off, :] += np.tensordot(
            gy[:, :, lo:hi, :], kern[d], axes=([3], [1])
        )
    return gx


def timeconv_bwd_k(x, gy, k):
    """Gradients of timeconv_fwd w.r.t. kernel and bias."""
    B, F, L, C = x.shape
    O = gy.shape[3]
    h = k // 2
    gk = np.zeros((k, C, O), dtype=np.float64)
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        gk[d] = np.tensordot(
            x[:, :, lo + off:hi + off, :], gy[:, :, lo:hi, :],
            axes=([0, 1, 2], [0, 1, 2]),
        )
    gb = gy.sum(axis=(0, 1, 2))
    return gk, gb


def dwconv_fwd(x, taps, bias):
    """Depthwise local mixing along frames: one 3-tap filter per channel.

    x: (B, F, L, C), taps: (k, C), bias: (C,).
    """
    B, F, L, C = x.shape
    k = taps.shape[0]
    h = k // 2
    y = np.empty((B, F, L, C), dtype=np.float64)
    y[...] = bias
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        y[:, :, lo:hi, :] += x[:, :, lo + off:hi + off, :] * taps[d]
    return y


def dwconv_bwd_x(gy, taps):
    B, F, L, C = gy.shape
    k = taps.shape[0]
    h = k // 2
    gx = np.zeros((B, F, L, C), dtype=np.float64)
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        gx[:, :, lo + off:hi + off, :] += gy[:, :, lo:hi, :] * taps[d]
    return gx


def dwconv_bwd_k(x, gy, k):
    B, F, L, C = x.shape
    h = k // 2
    gt = np.zeros((k, C), dtype=np.float64)
    for d in range(k):
        off = d - h
        lo = max(0, -off)
        hi = L - max(0, off)
        if hi <= lo:
            continue
        gt[d] = np.sum(
            x[:, :, lo + off:hi + off, :] * gy[:, :, lo:hi, :], axis=(0, 1, 2)
        )
    gb = gy.sum(axis=(0, 1, 2))
    return gt, gb


def silu_fwd(x):
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def silu_bwd(x, gy):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return gy * (s * (1.0 + x * (1.0 - s)))


def glu_fwd(a, g):
    """Gated linear unit a * sigmoid(g)."""
    with np.errstate(over="ignore"):
        return a / (1.0 + np.exp(-g))


def glu_bwd(a, g, gy):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-g))
    return gy * s, gy * a * s * (1.0 - s)


def adam_ema_step(p, g, m, v, ema, step, lr, beta1, beta2, eps, decay):
    """One fused Adam update plus EMA shadow update, all in place."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    ema *= decay
    ema += (1.0 - decay) * p


def em_step(x, y, noise, gamma_dt, g_sqrt_dt):
    """One Euler-Maruyama step of dx = gamma*(y - x)*dt + g*dw, in place.

    Operates on the interleaved real view: x (paths, n), y (n,), noise
    (paths, n), all float64.
    """
    x += gamma_dt * (y[None, :] - x) + g_sqrt_dt * noise


def overlap_add(frames, hop, out_len):
    """Sum hop-shifted frames into a signal of length out_len."""
    L, W = frames.shape
    out = np.zeros(out_len, dtype=np.float64)
    for l in range(L):
        out[l * hop:l * hop + W] += frames[l]
    return out
