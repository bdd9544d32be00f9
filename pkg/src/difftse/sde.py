"""Closed-form mathematics of the conditional forward SDE.

The forward process pulls a clean spectrogram x0 toward the mixture y while
injecting Gaussian noise:

    dx_t = gamma * (y - x_t) dt + g(t) dw,
    g(t) = sigma0 * (sigma1/sigma0)**t * sqrt(2*log(sigma1/sigma0)).

Its transition law given (x0, y) is Gaussian with

    mean(t)    = exp(-gamma*t) * x0 + (1 - exp(-gamma*t)) * y
    sigma(t)^2 = sigma0^2 * ((sigma1/sigma0)**(2t) - exp(-2*gamma*t))
                 * log(sigma1/sigma0) / (gamma + log(sigma1/sigma0))

States are complex (F, L) arrays.  Noise is circularly-symmetric complex:
real and imaginary parts are i.i.d. N(0, 1/2) so E|z|^2 = 1, and sigma(t)^2
is the per-entry complex variance E|x_t - mean|^2.  All scores here are of
the form -(x - mean)/var, the gradient of the Gaussian log-density written
with per-entry variance var over the interleaved real view.

Everything is a pure function of its inputs plus an explicitly passed
numpy Generator; there is no hidden state.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .backends import em_step
from .errors import ContractError, DomainError, SingularityError

# Minimum process time for operations that need sigma(t) > 0 (scores,
# losses, sampling schedules).  Kept small so the reverse process ends
# close enough to t=0 that the residual pull toward the mixture,
# 1 - exp(-gamma*t_eps), stays under 2% for gamma=2.
T_EPS = 0.01


@dataclass(frozen=True)
class SdeParams:
    """Stiffness and noise schedule of the forward process."""

    gamma: float = 2.0
    sigma0: float = 0.05
    sigma1: float = 0.5
    t_max: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise DomainError(f"gamma must be > 0, got {self.gamma}")
        if not (0 < self.sigma0 < self.sigma1):
            raise DomainError(
                f"need 0 < sigma0 < sigma1, got {self.sigma0}, {self.sigma1}"
            )
        if self.t_max <= 0:
            raise DomainError(f"t_max must be > 0, got {self.t_max}")

    @property
    def log_ratio(self) -> float:
        return float(np.log(self.sigma1 / self.sigma0))


class KernelMoments(NamedTuple):
    mean: np.ndarray
    std: float


def _check_same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ContractError(f"shape mismatch: {sorted(shapes)}")


def _check_time(t: float, p: SdeParams):
    if not (0.0 <= t <= p.t_max):
        raise DomainError(f"t={t} outside [0, {p.t_max}]")


def standard_complex_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw z with i.i.d. real/imag parts ~ N(0, 1/2), so E|z|^2 = 1."""
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return np.sqrt(0.5) * (re + 1j * im)


def drift(x: np.ndarray, y: np.ndarray, p: SdeParams) -> np.ndarray:
    """Drift gamma * (y - x); zero exactly at x = y."""
    _check_same_shape(x, y)
    return p.gamma * (y - x)


def diffusion_coeff(t: float, p: SdeParams) -> float:
    """Diffusion coefficient g(t); strictly increasing and positive."""
    _check_time(t, p)
    return float(
        p.sigma0 * (p.sigma1 / p.sigma0) ** t * np.sqrt(2.0 * p.log_ratio)
    )


def mean_weight(t: float, p: SdeParams) -> float:
    """exp(-gamma*t), the weight of x0 in the transition mean."""
    return float(np.exp(-p.gamma * t))


def sigma_sq(t: float, p: SdeParams) -> float:
    """Per-entry complex variance of the transition law at time t."""
    lr = p.log_ratio
    ratio = (p.sigma1 / p.sigma0) ** (2.0 * t)
    return float(p.sigma0 ** 2 * (ratio - np.exp(-2.0 * p.gamma * t)) * lr / (p.gamma + lr))


def sigma(t: float, p: SdeParams) -> float:
    return float(np.sqrt(max(sigma_sq(t, p), 0.0)))


def sigma_of(t, p: SdeParams) -> np.ndarray:
    """Vectorized sigma(t) for an array of process times."""
    tv = np.asarray(t, dtype=np.float64)
    lr = p.log_ratio
    ratio = (p.sigma1 / p.sigma0) ** (2.0 * tv)
    var = p.sigma0 ** 2 * (ratio - np.exp(-2.0 * p.gamma * tv)) * lr / (p.gamma + lr)
    return np.sqrt(np.maximum(var, 0.0))


def kernel_moments(x0: np.ndarray, y: np.ndarray, t: float, p: SdeParams) -> KernelMoments:
    """Transition mean and std of x_t given (x0, y)."""
    _check_same_shape(x0, y)
    _check_time(t, p)
    w = mean_weight(t, p)
    return KernelMoments(mean=w * x0 + (1.0 - w) * y, std=sigma(t, p))


def sample_xt(x0, y, t: float, p: SdeParams, rng: np.random.Generator):
    """Draw (x_t, z) by reparameterization: x_t = mean + sigma(t) * z.

    The noise draw z is returned because the score-matching losses need it.
    """
    mean, std = kernel_moments(x0, y, t, p)
    z = standard_complex_noise(rng, x0.shape)
    return mean + std * z, z


def kernel_score(xt, x0, y, t: float, p: SdeParams) -> np.ndarray:
    """Closed-form transition score -(x_t - mean)/sigma(t)^2.

    Satisfies kernel_score(mean + sigma*z) = -z/sigma identically.
    """
    _check_same_shape(xt, x0, y)
    _check_time(t, p)
    var = sigma_sq(t, p)
    if var <= 0.0:
        raise SingularityError(f"sigma({t})^2 = {var}; score undefined")
    w = mean_weight(t, p)
    mean = w * x0 + (1.0 - w) * y
    return -(xt - mean) / var


class SimMoments(NamedTuple):
    t: float
    mean: np.ndarray
    std: float


def forward_simulate(
    x0,
    y,
    p: SdeParams,
    n_paths: int,
    dt: float,
    rng: np.random.Generator,
    checkpoints=(0.25, 0.5, 1.0),
    zero_diffusion: bool = False,
):
    """Euler-Maruyama verification oracle for the transition law.

    Integrates n_paths copies of the forward SDE from x0 and reports, at
    each checkpoint (snapped to the step grid), the empirical path mean and
    the RMS per-entry residual std.  With zero_diffusion=True the noise
    term is dropped, leaving the exponential relaxation ODE.
    """
    _check_same_shape(x0, y)
    if dt <= 0.0:
        raise DomainError(f"dt must be > 0, got {dt}")
    if n_paths <= 0:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    checkpoints = sorted(float(c) for c in checkpoints)
    if checkpoints[0] < 0 or checkpoints[-1] > p.t_max:
        raise DomainError("checkpoints must lie in [0, t_max]")

    shape = x0.shape
    m = x0.size
    # Interleaved real view of the path ensemble, (n_paths, 2m).
    x = np.empty((n_paths, 2 * m), dtype=np.float64)
    x0_r = np.ascontiguousarray(x0, dtype=np.complex128).view(np.float64).ravel()
    x[:] = x0_r
    y_r = np.ascontiguousarray(y, dtype=np.complex128).view(np.float64).ravel()

    ck_steps = [int(round(c / dt)) for c in checkpoints]
    out = []
    step = 0
    root_half = np.sqrt(0.5)
    for target in ck_steps:
        while step < target:
            t = step * dt
            g = diffusion_coeff(min(t, p.t_max), p)
            if zero_diffusion:
                noise = np.zeros_like(x)
            else:
                noise = root_half * rng.standard_normal(x.shape)
            em_step(x, y_r, noise, p.gamma * dt, g * np.sqrt(dt))
            step += 1
        xc = x.view(np.complex128).reshape(n_paths, m)
        mean = xc.mean(axis=0)
        resid = xc - mean
        std = float(np.sqrt(np.mean(np.abs(resid) ** 2)))
        out.append(SimMoments(t=step * dt, mean=mean.reshape(shape), std=std))
    return out
