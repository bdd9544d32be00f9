"""Differentiable layers over (batch, freq, frames, channels) feature maps.

Each layer caches what its backward pass needs during forward; a layer
instance therefore serves one forward/backward pair at a time.  Gradients
accumulate into Param.grads (callers zero them between optimizer steps).
"""

import numpy as np

from ..backends import (
    dwconv_bwd_k,
    dwconv_bwd_x,
    dwconv_fwd,
    glu_bwd,
    glu_fwd,
    silu_bwd,
    silu_fwd,
    timeconv_bwd_k,
    timeconv_bwd_x,
    timeconv_fwd,
)
from ..errors import ContractError
from .params import Param


def silu(x):
    return silu_fwd(np.asarray(x, dtype=np.float64))


def fuse_multiply(features: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Multiplication fusion: scale each channel of a feature map by a
    per-example vector, broadcast over frequency and frames.

    features: (B, F, L, C), vec: (B, C).  Exactly elementwise, so scaling
    vec by a scalar scales the output by the same scalar.
    """
    if features.shape[-1] != vec.shape[-1] or features.shape[0] != vec.shape[0]:
        raise ContractError(
            f"fusion shapes incompatible: {features.shape} vs {vec.shape}"
        )
    return features * vec[:, None, None, :]


class Layer:
    def params(self):
        return []

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


class Dense(Layer):
    """Per-position channel mixing y = x @ W + b on the last axis."""

    def __init__(self, name, n_in, n_out, rng=None, bias=True, zero_init=False,
                 scale=None):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            if scale is None:
                scale = 1.0 / np.sqrt(n_in)
            w = scale * rng.standard_normal((n_in, n_out))
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(n_out)) if bias else None
        self._x = None

    def params(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def forward(self, x):
        self._x = x
        y = np.tensordot(x, self.W.values, axes=([-1], [0]))
        if self.b is not None:
            y += self.b.values
        return y

    def backward(self, gy):
        x = self._x
        nin = x.shape[-1]
        nout = gy.shape[-1]
        x2 = x.reshape(-1, nin)
        g2 = gy.reshape(-1, nout)
        self.W.grads += x2.T @ g2
        if self.b is not None:
            self.b.grads += g2.sum(axis=0)
        return ((g2 @ self.W.values.T).reshape(x.shape),)


class TimeConv(Layer):
    """Convolution-like local mixing along the frame axis (zero padded).

    depthwise=True applies an independent k-tap filter per channel; the
    default mixes channels fully.
    """

    def __init__(self, name, n_in, n_out, rng=None, kernel=3, zero_init=False,
                 depthwise=False):
        self.depthwise = depthwise
        if depthwise:
            if n_in != n_out:
                raise ContractError("depthwise mixing keeps channel count")
            if zero_init:
                k = np.zeros((kernel, n_in))
            else:
                k = rng.standard_normal((kernel, n_in)) / np.sqrt(kernel)
        elif zero_init:
            k = np.zeros((kernel, n_in, n_out))
        else:
            k = rng.standard_normal((kernel, n_in, n_out)) / np.sqrt(kernel * n_in)
        self.K = Param(f"{name}.K", k)
        self.b = Param(f"{name}.b", np.zeros(n_out))
        self.kernel = kernel
        self._x = None

    def params(self):
        return [self.K, self.b]

    def forward(self, x):
        self._x = np.ascontiguousarray(x)
        if self.depthwise:
            return dwconv_fwd(self._x, self.K.values, self.b.values)
        return timeconv_fwd(self._x, self.K.values, self.b.values)

    def backward(self, gy):
        gy = np.ascontiguousarray(gy)
        if self.depthwise:
            gk, gb = dwconv_bwd_k(self._x, gy, self.kernel)
            gx = dwconv_bwd_x(gy, self.K.values)
        else:
            gk, gb = timeconv_bwd_k(self._x, gy, self.kernel)
            gx = timeconv_bwd_x(gy, self.K.values)
        self.K.grads += gk
        self.b.grads += gb
        return (gx,)


class SiLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = np.ascontiguousarray(x)
        return silu_fwd(self._x)

    def backward(self, gy):
        return (silu_bwd(self._x, gy),)


class MultiplyFusion(Layer):
    """Layer wrapper around fuse_multiply; inputs (features, vec)."""

    def __init__(self):
        self._feat = None
        self._vec = None

    def forward(self, features, vec):
        self._feat, self._vec = features, vec
        return fuse_multiply(features, vec)

    def backward(self, gy):
        g_feat = gy * self._vec[:, None, None, :]
        g_vec = np.einsum("bflc,bflc->bc", gy, self._feat)
        return (g_feat, g_vec)


class ConcatChannels(Layer):
    """Concatenate feature maps along the channel axis."""

    def __init__(self):
        self._splits = None

    def forward(self, *xs):
        self._splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return np.concatenate(xs, axis=-1)

    def backward(self, gy):
        return tuple(np.split(gy, self._splits, axis=-1))


class AvgPoolFrames(Layer):
    """Mean over the frame axis: (B, F, L, C) -> (B, F, C)."""

    def __init__(self):
        self._n = None

    def forward(self, x):
        self._n = x.shape[2]
        return x.mean(axis=2)

    def backward(self, gy):
        g = np.repeat(gy[:, :, None, :], self._n, axis=2) / self._n
        return (g,)


class FreqEmbed(Layer):
    """Learned per-frequency-bin identity vectors, broadcast over frames.

    Takes any (B, F, L, *) map as a shape reference and emits
    (B, F, L, dim) from an (F, dim) table.
    """

    def __init__(self, name, n_freq, dim, rng):
        self.table = Param(f"{name}.table", rng.standard_normal((n_freq, dim)))
        self._shape = None

    def params(self):
        return [self.table]

    def forward(self, ref):
        B, F, L = ref.shape[:3]
        self._shape = (B, F, L)
        out = np.empty((B, F, L, self.table.values.shape[1]))
        out[...] = self.table.values[None, :, None, :]
        return out

    def backward(self, gy):
        self.table.grads += gy.sum(axis=(0, 2))
        return (None,)


class SqueezeAxis(Layer):
    """Drop a singleton axis (used to turn (B, 1, C) into (B, C))."""

    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        if x.shape[self.axis] != 1:
            raise ContractError(
                f"axis {self.axis} of {x.shape} is not singleton"
            )
        return np.squeeze(x, axis=self.axis)

    def backward(self, gy):
        return (np.expand_dims(gy, self.axis),)


class TimeEmbedding:
    """Sinusoidal embedding of the process time, deterministic in t.

    Frequencies form a geometric ladder so the embedding stays smooth
    (Lipschitz) over [0, 1].
    """

    def __init__(self, dim=16, max_freq=100.0):
        if dim % 2 != 0:
            raise ContractError("time embedding dimension must be even")
        self.dim = dim
        self.freqs = np.exp(
            np.linspace(0.0, np.log(max_freq), dim // 2)
        )

    def __call__(self, t):
        """t: scalar or (B,) array -> (B, dim) embedding."""
        tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
        ang = tv[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class GatedResidualBlock(Layer):
    """Pre-activation residual block: GLU gate, depthwise local time
    mixing, and a zero-initialized closing projection.

        u = silu(x)
        h = dense(u) [+ affine(time embedding)]     (2*hidden channels)
        v = glu(h)                                  (a * sigmoid(g))
        w = dwconv(v)                               (per-channel 3 taps)
        out = x + proj(w)                           (proj zero-init)

    Zero-initializing the projection makes a fresh block the identity map.
    """

    def __init__(self, name, channels, rng, hidden=None, kernel=3,
                 time_dim=None):
        hidden = hidden or channels
        self.act = SiLU()
        self.dense = Dense(f"{name}.dense", channels, 2 * hidden, rng)
        self.taffine = (
            Dense(f"{name}.taffine", time_dim, 2 * hidden, rng)
            if time_dim else None
        )
        self.conv = TimeConv(f"{name}.conv", hidden, hidden, rng,
                             kernel=kernel, depthwise=True)
        self.proj = Dense(f"{name}.proj", hidden, channels, zero_init=True)
        self._cache = None

    def params(self):
        ps = self.dense.params() + self.conv.params() + self.proj.params()
        if self.taffine is not None:
            ps += self.taffine.params()
        return ps

    def forward(self, x, temb=None):
        u = self.act.forward(x)
        h = self.dense.forward(u)
        if self.taffine is not None:
            if temb is None:
                raise ContractError("block expects a time embedding")
            h = h + self.taffine.forward(temb)[:, None, None, :]
        a, g = np.split(h, 2, axis=-1)
        v = glu_fwd(a, g)
        self._cache = (a, g)
        return x + self.proj.forward(self.conv.forward(v))

    def backward(self, gy):
        a, g = self._cache
        gw = self.proj.backward(gy)[0]
        gv = self.conv.backward(gw)[0]
        ga, gg = glu_bwd(a, g, gv)
        gh = np.concatenate([ga, gg], axis=-1)
        if self.taffine is not None:
            self.taffine.backward(gh.sum(axis=(1, 2)))
        gu = self.dense.backward(gh)[0]
        gx = self.act.backward(gu)[0]
        return (gy + gx,) if self.taffine is None else (gy + gx, None)
