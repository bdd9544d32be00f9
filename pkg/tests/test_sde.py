"""Forward-SDE mathematics against analytic and Monte-Carlo oracles."""

import numpy as np
import pytest

from difftse import sde
from difftse.errors import ContractError, DomainError, SingularityError

from conftest import rand_spec

# Derived once from the short-horizon Euler-Maruyama variance estimate
# Var[x_dt - x0]/dt -> g(0)^2 (see test_diffusion_coeff_matches_em_estimate)
# and frozen.  sigma0 * sqrt(2 log(sigma1/sigma0)) for the default params.
G_AT_ZERO = 0.10729830131446737
# sigma(1)^2 from the closed form for gamma=2, sigma0=0.05, sigma1=0.5,
# cross-checked against the simulation oracle below.
SIGMA1_SQ = 0.13376628875812066


def test_params_validation():
    with pytest.raises(DomainError):
        sde.SdeParams(gamma=0.0)
    with pytest.raises(DomainError):
        sde.SdeParams(sigma0=0.5, sigma1=0.5)
    with pytest.raises(DomainError):
        sde.SdeParams(t_max=0.0)


def test_drift_fixed_point(params, rng):
    x = rand_spec(rng)
    assert np.all(sde.drift(x, x, params) == 0)


def test_drift_direct_substitution(params):
    x = np.zeros((3, 4), dtype=np.complex128)
    y = np.ones((3, 4), dtype=np.complex128)
    out = sde.drift(x, y, params)
    assert np.allclose(out, 2.0)


def test_drift_shape_mismatch(params, rng):
    with pytest.raises(ContractError):
        sde.drift(rand_spec(rng, (3, 4)), rand_spec(rng, (3, 5)), params)


def test_diffusion_coeff_matches_variance_rate(params, rng):
    # Two independent oracles for g(0).  First, the variance ODE
    # d sigma^2/dt = g^2 - 2 gamma sigma^2 pins g(0)^2 to the short-horizon
    # growth rate of the transition variance.
    h = 1e-7
    g0_sq_ode = sde.sigma_sq(h, params) / h
    assert abs(np.sqrt(g0_sq_ode) - G_AT_ZERO) / G_AT_ZERO < 1e-4
    # Second, a one-step Euler-Maruyama ensemble: Var[x_dt - x0]/dt.
    dt = 1e-4
    x0 = rand_spec(rng, (2, 2))
    y = rand_spec(rng, (2, 2))
    sims = sde.forward_simulate(x0, y, params, n_paths=50_000, dt=dt,
                                rng=np.random.default_rng(31),
                                checkpoints=(dt,))
    g0_sq_em = sims[0].std ** 2 / dt
    assert abs(np.sqrt(g0_sq_em) - G_AT_ZERO) / G_AT_ZERO < 0.02
    assert abs(sde.diffusion_coeff(0.0, params) - G_AT_ZERO) < 1e-12


def test_diffusion_coeff_ratio_and_monotonicity(params):
    g0 = sde.diffusion_coeff(0.0, params)
    g1 = sde.diffusion_coeff(1.0, params)
    assert abs(g1 / g0 - 10.0) < 1e-9
    assert (sde.diffusion_coeff(0.25, params)
            < sde.diffusion_coeff(0.5, params)
            < sde.diffusion_coeff(0.75, params))


def test_diffusion_coeff_domain(params):
    with pytest.raises(DomainError):
        sde.diffusion_coeff(-0.1, params)
    with pytest.raises(DomainError):
        sde.diffusion_coeff(1.5, params)


def test_kernel_moments_at_zero(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    km = sde.kernel_moments(x0, y, 0.0, params)
    assert np.abs(km.mean - x0).max() <= 1e-12
    assert km.std == 0.0


def test_kernel_moments_at_one(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    km = sde.kernel_moments(x0, y, 1.0, params)
    w = np.exp(-2.0)
    assert np.allclose(km.mean, w * x0 + (1 - w) * y, atol=1e-14)
    assert abs(km.std ** 2 - SIGMA1_SQ) < 1e-12


def test_sigma_one_sq_against_simulation(params, rng):
    # Oracle: empirical variance of forward paths at t=1.
    x0, y = rand_spec(rng, (3, 3)), rand_spec(rng, (3, 3))
    sims = sde.forward_simulate(x0, y, params, n_paths=4000, dt=2e-3,
                                rng=np.random.default_rng(5),
                                checkpoints=(1.0,))
    assert abs(sims[0].std ** 2 - SIGMA1_SQ) / SIGMA1_SQ < 0.05


def test_sample_xt_at_zero(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    xt, _ = sde.sample_xt(x0, y, 0.0, params, rng)
    assert np.array_equal(xt, x0)


def test_sample_xt_seed_reproducible(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    a = sde.sample_xt(x0, y, 0.5, params, np.random.default_rng(9))
    b = sde.sample_xt(x0, y, 0.5, params, np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_xt_empirical_moments(params, rng):
    x0, y = rand_spec(rng, (2, 2)), rand_spec(rng, (2, 2))
    t = 0.5
    km = sde.kernel_moments(x0, y, t, params)
    n = 10_000
    draws = np.stack([
        sde.sample_xt(x0, y, t, params, np.random.default_rng(1000 + i))[0]
        for i in range(n)
    ])
    emp_mean = draws.mean(axis=0)
    # Standard error of the mean per complex entry is std/sqrt(n).
    se = km.std / np.sqrt(n)
    assert np.abs(emp_mean - km.mean).max() < 3 * se * 3
    emp_std = np.sqrt(np.mean(np.abs(draws - km.mean) ** 2))
    se_std = km.std / np.sqrt(2 * n * x0.size)
    assert abs(emp_std - km.std) < 3 * se_std * 3


def test_kernel_score_zero_at_mean(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    km = sde.kernel_moments(x0, y, 0.3, params)
    assert np.abs(sde.kernel_score(km.mean, x0, y, 0.3, params)).max() == 0.0


def test_kernel_score_noise_identity(params, rng):
    # score(mean + sigma z) = -z / sigma, to rounding.
    x0, y = rand_spec(rng), rand_spec(rng)
    for t in (0.05, 0.3, 0.9):
        xt, z = sde.sample_xt(x0, y, t, params, rng)
        s = sde.kernel_score(xt, x0, y, t, params)
        target = -z / sde.sigma(t, params)
        rel = np.abs(s - target).max() / np.abs(target).max()
        assert rel < 1e-12


def test_kernel_score_finite_difference(params, rng):
    # Oracle: central differences on the explicit Gaussian log-density
    # l(v) = -sum((v - mean)^2) / (2 var) over the interleaved real view.
    x0, y = rand_spec(rng, (3, 3)), rand_spec(rng, (3, 3))
    t = 0.4
    km = sde.kernel_moments(x0, y, t, params)
    var = km.std ** 2
    xt, _ = sde.sample_xt(x0, y, t, params, rng)

    def logp(v):
        return -np.sum((v - mean_v) ** 2) / (2 * var)

    mean_v = km.mean.view(np.float64).ravel().copy()
    v0 = xt.view(np.float64).ravel().copy()
    h = 1e-6
    num = np.zeros_like(v0)
    for i in range(v0.size):
        vp = v0.copy(); vp[i] += h
        vm = v0.copy(); vm[i] -= h
        num[i] = (logp(vp) - logp(vm)) / (2 * h)
    ana = sde.kernel_score(xt, x0, y, t, params).view(np.float64).ravel()
    rel = np.abs(ana - num).max() / np.abs(num).max()
    assert rel < 1e-6


def test_kernel_score_singularity(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    with pytest.raises(SingularityError):
        sde.kernel_score(x0, x0, y, 0.0, params)


def test_forward_simulate_matches_kernel(params, rng):
    x0 = rand_spec(rng, (3, 3), offset=0.2)
    y = rand_spec(rng, (3, 3), offset=-0.1)
    sims = sde.forward_simulate(x0, y, params, n_paths=4000, dt=2e-3,
                                rng=np.random.default_rng(11))
    for sm in sims:
        km = sde.kernel_moments(x0, y, sm.t, params)
        assert np.linalg.norm(sm.mean - km.mean) / np.linalg.norm(km.mean) < 0.03
        assert abs(sm.std - km.std) / km.std < 0.05


def test_forward_simulate_error_shrinks_with_dt(params):
    # Kernel consistency: statistics approach the closed form as dt drops.
    rng_a = np.random.default_rng(3)
    x0 = rand_spec(rng_a, (2, 2), offset=0.3)
    y = rand_spec(rng_a, (2, 2), offset=-0.3)

    def std_err(dt, seed):
        sims = sde.forward_simulate(x0, y, params, n_paths=20_000, dt=dt,
                                    rng=np.random.default_rng(seed),
                                    checkpoints=(1.0,))
        return abs(sims[0].std - sde.sigma(1.0, params))

    coarse = std_err(4e-2, 21)
    fine = std_err(1e-3, 22)
    assert fine < coarse


def test_forward_simulate_zero_diffusion_is_ode(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    sims = sde.forward_simulate(x0, y, params, n_paths=3, dt=5e-4,
                                rng=rng, checkpoints=(0.5,),
                                zero_diffusion=True)
    w = np.exp(-params.gamma * sims[0].t)
    assert np.abs(sims[0].mean - (w * x0 + (1 - w) * y)).max() < 1e-3
    assert sims[0].std < 1e-12


def test_forward_simulate_stiff_drift_reaches_mixture(rng):
    p = sde.SdeParams(gamma=25.0)
    x0, y = rand_spec(rng), rand_spec(rng)
    sims = sde.forward_simulate(x0, y, p, n_paths=2000, dt=5e-4, rng=rng,
                                checkpoints=(1.0,))
    # exp(-25) is negligible: the path mean sits on the mixture.
    assert np.linalg.norm(sims[0].mean - y) / np.linalg.norm(y) < 0.05


def test_forward_simulate_argument_errors(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    with pytest.raises(DomainError):
        sde.forward_simulate(x0, y, params, n_paths=0, dt=1e-3, rng=rng)
    with pytest.raises(DomainError):
        sde.forward_simulate(x0, y, params, n_paths=10, dt=0.0, rng=rng)


def test_sigma_strictly_increasing(params):
    ts = np.linspace(1e-4, params.t_max, 100)
    vals = [sde.sigma(float(t), params) for t in ts]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_kernel_mean_linearity(params, rng):
    x0, y = rand_spec(rng), rand_spec(rng)
    a = 2.7
    m1 = sde.kernel_moments(a * x0, a * y, 0.37, params).mean
    m2 = a * sde.kernel_moments(x0, y, 0.37, params).mean
    assert np.abs(m1 - m2).max() < 1e-12 * max(1.0, np.abs(m2).max())
