"""numpy/numba kernel parity and backend selection."""

import os
import subprocess
import sys

import numpy as np
import pytest

from difftse.backends import KERNEL_NAMES, active_backend, numpy_impl

try:
    from difftse.backends import numba_impl
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def _cases(seed=0):
    rng = np.random.default_rng(seed)
    B, F, L, C, O, k = 3, 4, 9, 5, 6, 3
    x = rng.standard_normal((B, F, L, C))
    kern = rng.standard_normal((k, C, O))
    bias = rng.standard_normal(O)
    gy = rng.standard_normal((B, F, L, O))
    taps = rng.standard_normal((k, C))
    biasc = rng.standard_normal(C)
    gyc = rng.standard_normal((B, F, L, C))
    return x, kern, bias, gy, taps, biasc, gyc


@needs_numba
def test_timeconv_parity():
    x, kern, bias, gy, *_ = _cases()
    a = numpy_impl.timeconv_fwd(x, kern, bias)
    b = numba_impl.timeconv_fwd(x, kern, bias)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-13)
    assert np.allclose(numpy_impl.timeconv_bwd_x(gy, kern),
                       numba_impl.timeconv_bwd_x(gy, kern),
                       rtol=1e-12, atol=1e-13)
    gk1, gb1 = numpy_impl.timeconv_bwd_k(x, gy, 3)
    gk2, gb2 = numba_impl.timeconv_bwd_k(x, gy, 3)
    assert np.allclose(gk1, gk2, rtol=1e-12, atol=1e-12)
    assert np.allclose(gb1, gb2, rtol=1e-12, atol=1e-12)


@needs_numba
def test_dwconv_parity():
    x, _, _, _, taps, biasc, gyc = _cases(1)
    assert np.allclose(numpy_impl.dwconv_fwd(x, taps, biasc),
                       numba_impl.dwconv_fwd(x, taps, biasc),
                       rtol=1e-13, atol=1e-14)
    assert np.allclose(numpy_impl.dwconv_bwd_x(gyc, taps),
                       numba_impl.dwconv_bwd_x(gyc, taps),
                       rtol=1e-13, atol=1e-14)
    gt1, gb1 = numpy_impl.dwconv_bwd_k(x, gyc, 3)
    gt2, gb2 = numba_impl.dwconv_bwd_k(x, gyc, 3)
    assert np.allclose(gt1, gt2, rtol=1e-12, atol=1e-13)
    assert np.allclose(gb1, gb2, rtol=1e-12, atol=1e-13)


@needs_numba
def test_activation_parity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 5, 6)) * 8
    gy = rng.standard_normal(x.shape)
    assert np.allclose(numpy_impl.silu_fwd(x), numba_impl.silu_fwd(x),
                       rtol=1e-14, atol=1e-15)
    assert np.allclose(numpy_impl.silu_bwd(x, gy), numba_impl.silu_bwd(x, gy),
                       rtol=1e-14, atol=1e-15)
    a = rng.standard_normal((3, 7))
    g = rng.standard_normal((3, 7)) * 5
    gv = rng.standard_normal((3, 7))
    assert np.allclose(numpy_impl.glu_fwd(a, g), numba_impl.glu_fwd(a, g),
                       rtol=1e-14, atol=1e-15)
    ga1, gg1 = numpy_impl.glu_bwd(a, g, gv)
    ga2, gg2 = numba_impl.glu_bwd(a, g, gv)
    assert np.allclose(ga1, ga2, rtol=1e-14, atol=1e-15)
    assert np.allclose(gg1, gg2, rtol=1e-14, atol=1e-15)


@needs_numba
def test_adam_ema_parity():
    rng = np.random.default_rng(3)
    shape = (4, 5)
    p0 = rng.standard_normal(shape)
    p1, m1, v1, e1 = p0.copy(), np.zeros(shape), np.zeros(shape), p0.copy()
    p2, m2, v2, e2 = p0.copy(), np.zeros(shape), np.zeros(shape), p0.copy()
    for step in range(1, 4):
        g = rng.standard_normal(shape)
        numpy_impl.adam_ema_step(p1, g, m1, v1, e1, step, 1e-3, 0.9, 0.999,
                                 1e-8, 0.99)
        numba_impl.adam_ema_step(p2, g, m2, v2, e2, step, 1e-3, 0.9, 0.999,
                                 1e-8, 0.99)
    for a, b in ((p1, p2), (m1, m2), (v1, v2), (e1, e2)):
        assert np.allclose(a, b, rtol=1e-14, atol=1e-16)


@needs_numba
def test_em_step_parity():
    rng = np.random.default_rng(4)
    x1 = rng.standard_normal((10, 8))
    x2 = x1.copy()
    y = rng.standard_normal(8)
    noise = rng.standard_normal((10, 8))
    numpy_impl.em_step(x1, y, noise, 0.002, 0.01)
    numba_impl.em_step(x2, y, noise, 0.002, 0.01)
    assert np.allclose(x1, x2, rtol=1e-15, atol=1e-16)


@needs_numba
def test_overlap_add_parity():
    rng = np.random.default_rng(5)
    frames = rng.standard_normal((7, 16))
    a = numpy_impl.overlap_add(frames, 4, 7 * 4 + 16)
    b = numba_impl.overlap_add(frames, 4, 7 * 4 + 16)
    assert np.allclose(a, b, rtol=1e-15, atol=1e-16)


def test_kernel_names_exist():
    import difftse.backends as bk
    for name in KERNEL_NAMES:
        assert hasattr(bk, name)
        assert hasattr(numpy_impl, name)


def test_env_flag_selects_backend():
    code = ("import difftse.backends as b; print(b.active_backend())")
    for want in ("numpy",) + (("numba",) if HAVE_NUMBA else ()):
        env = dict(os.environ, DIFFTSE_BACKEND=want)
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == want
    env = dict(os.environ, DIFFTSE_BACKEND="bogus")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True)
    assert out.returncode != 0


def test_active_backend_is_valid():
    assert active_backend() in ("numpy", "numba")
