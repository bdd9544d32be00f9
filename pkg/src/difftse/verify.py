"""Oracle verification suites behind the `verify` command.

Three independent checks, each comparing an implementation path against an
oracle that shares none of its code path:

  * kernel:    Euler-Maruyama simulation of the forward SDE versus the
               closed-form transition moments, plus boundary identities.
  * sampler:   predictor-corrector sampling with the exact Gaussian score
               versus the analytic conditional it must recover.
  * gradients: analytic backpropagation versus central finite differences,
               for the layer substrate and for the training losses.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import sde
from .models import DiffTse, ModelConfig, OracleGaussianScore
from .nets import Dense, GatedResidualBlock, LayerGraph, grad_check
from .sampling import SamplerConfig, extract_ensemble
from .training import score_loss_interior, score_loss_terminal


@dataclass
class SuiteReport:
    name: str
    passed: bool
    lines: list = field(default_factory=list)
    elapsed_s: float = 0.0


def verify_kernel(p: sde.SdeParams | None = None, n_paths: int = 10_000,
                  dt: float = 1e-3, seed: int = 0,
                  checkpoints=(0.25, 0.5, 1.0)) -> SuiteReport:
    """Simulation vs closed-form transition law; tolerances 2% / 5%."""
    t0 = time.perf_counter()
    p = p or sde.SdeParams()
    rng = np.random.default_rng(seed)
    lines, ok = [], True

    x0 = 0.2 + 0.3 * sde.standard_complex_noise(rng, (4, 4))
    y = -0.1 + 0.3 * sde.standard_complex_noise(rng, (4, 4))

    # Boundary identities.
    var0 = sde.sigma_sq(0.0, p)
    m0 = sde.kernel_moments(x0, y, 0.0, p)
    id_ok = abs(var0) <= 1e-12 and float(np.abs(m0.mean - x0).max()) <= 1e-12
    ok &= id_ok
    lines.append(f"sigma(0)^2 = {var0:.3e}, |mean(0) - x0|max = "
                 f"{float(np.abs(m0.mean - x0).max()):.3e} "
                 f"[{'ok' if id_ok else 'FAIL'}]")

    sim = sde.forward_simulate(x0, y, p, n_paths=n_paths, dt=dt, rng=rng,
                               checkpoints=checkpoints)
    for sm in sim:
        km = sde.kernel_moments(x0, y, sm.t, p)
        mean_err = float(
            np.linalg.norm(sm.mean - km.mean) / np.linalg.norm(km.mean)
        )
        std_err = abs(sm.std - km.std) / km.std
        this_ok = mean_err < 0.02 and std_err < 0.05
        ok &= this_ok
        lines.append(
            f"t={sm.t:.2f}: mean rel err {mean_err:.4f} (<0.02), "
            f"std rel err {std_err:.4f} (<0.05) [{'ok' if this_ok else 'FAIL'}]"
        )
    return SuiteReport("kernel-vs-monte-carlo", bool(ok), lines,
                       time.perf_counter() - t0)


def verify_sampler(p: sde.SdeParams | None = None, n_samples: int = 500,
                   seed: int = 123) -> SuiteReport:
    """PC sampling with the exact Gaussian score must recover the analytic
    conditional: mean error < 5% of the prior-to-posterior shift, std
    error < 10%."""
    t0 = time.perf_counter()
    p = p or sde.SdeParams()
    rng = np.random.default_rng(42)
    m = 0.4 * sde.standard_complex_noise(rng, (6, 6))
    y = m + 0.5 * sde.standard_complex_noise(rng, (6, 6))
    P = 0.002

    oracle = OracleGaussianScore(m, P, p)
    cfg = SamplerConfig(n_steps=30, corrector_iters=1, r=0.5,
                        ensemble=n_samples, seed=seed)
    _, traces = extract_ensemble(y, None, oracle, p, cfg)
    finals = np.stack([tr.final for tr in traces])

    shift = float(np.linalg.norm(m - y))
    mean_err = float(np.linalg.norm(finals.mean(axis=0) - m)) / shift
    emp_std = float(np.sqrt(np.mean(np.abs(finals - finals.mean(0)) ** 2)))
    std_err = abs(emp_std - np.sqrt(P)) / np.sqrt(P)
    ok = mean_err < 0.05 and std_err < 0.10
    lines = [
        f"posterior mean err {mean_err:.4f} of shift (<0.05), "
        f"std err {std_err:.4f} (<0.10) over {n_samples} runs "
        f"[{'ok' if ok else 'FAIL'}]"
    ]
    return SuiteReport("sampler-vs-analytic-posterior", bool(ok), lines,
                       time.perf_counter() - t0)


def verify_gradients(seed: int = 0) -> SuiteReport:
    """Backprop vs central differences on the substrate and the losses."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    lines, ok = [], True

    g = LayerGraph()
    g.add_input("x")
    g.add("d1", Dense("d1", 5, 4, rng), "x")
    g.add("d2", Dense("d2", 4, 3, rng), "d1")
    worst, _ = grad_check(g, {"x": rng.standard_normal((2, 2, 3, 5))}, ["d2"])
    this_ok = worst < 1e-8
    ok &= this_ok
    lines.append(f"linear graph grad err {worst:.2e} (<1e-8) "
                 f"[{'ok' if this_ok else 'FAIL'}]")

    g2 = LayerGraph()
    g2.add_input("x")
    g2.add_input("t")
    g2.add("b", GatedResidualBlock("b", 4, rng, time_dim=4), "x", "t")
    worst2, _ = grad_check(
        g2,
        {"x": rng.standard_normal((2, 2, 3, 4)),
         "t": rng.standard_normal((2, 4))},
        ["b"],
    )
    this_ok = worst2 < 1e-4
    ok &= this_ok
    lines.append(f"gated block grad err {worst2:.2e} (<1e-4) "
                 f"[{'ok' if this_ok else 'FAIL'}]")

    # Full training-loss gradient on a tiny score model.
    p = sde.SdeParams()
    cfg = ModelConfig(n_freq=5, width=6, blocks=1, embed_dim=4,
                      clue_hidden=6, freq_dim=3, time_dim=4)
    model = DiffTse(cfg, p, seed=3)
    x0 = 0.3 * sde.standard_complex_noise(rng, (5, 6))
    y = x0 + 0.3 * sde.standard_complex_noise(rng, (5, 6))
    c = 0.3 * sde.standard_complex_noise(rng, (5, 4))

    def loss_at(t, loss_seed):
        if t >= p.t_max:
            return score_loss_terminal(
                model, x0, y, c, np.random.default_rng(loss_seed), p
            )
        return score_loss_interior(
            model, x0, y, c, t, p, np.random.default_rng(loss_seed)
        )

    worst3 = 0.0
    for t_probe, loss_seed in ((0.4, 5), (p.t_max, 6)):
        model.zero_grads()
        xt, z, offset = _loss_state(model, x0, y, c, t_probe, p, loss_seed)
        s = model.score(xt, y, c, t_probe)
        resid = s + offset
        model.backward(2.0 * resid)
        h = 1e-5
        for param in model.params():
            flat = param.values.ravel()
            gflat = param.grads.ravel()
            idx = np.argsort(-np.abs(gflat))[:3]
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                up = loss_at(t_probe, loss_seed)
                flat[i] = keep - h
                down = loss_at(t_probe, loss_seed)
                flat[i] = keep
                num = (up - down) / (2 * h)
                err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6)
                worst3 = max(worst3, err)
    this_ok = worst3 < 1e-4
    ok &= this_ok
    lines.append(f"training-loss grad err {worst3:.2e} (<1e-4) "
                 f"[{'ok' if this_ok else 'FAIL'}]")
    return SuiteReport("gradient-checks", bool(ok), lines,
                       time.perf_counter() - t0)


def _loss_state(model, x0, y, c, t, p, loss_seed):
    from .training import interior_noise_state, terminal_noise_state
    rng = np.random.default_rng(loss_seed)
    if t >= p.t_max:
        return terminal_noise_state(x0, y, p, rng)
    return interior_noise_state(x0, y, t, p, rng)


def run_all(quick: bool = False):
    """Run every suite; returns (all_passed, list of SuiteReport).

    quick keeps the full path count (the tolerances assume it) but
    integrates the verification SDE with a coarser step.
    """
    dt = 4e-3 if quick else 1e-3
    n_samples = 200 if quick else 500
    reports = [
        verify_kernel(dt=dt),
        verify_sampler(n_samples=n_samples),
        verify_gradients(),
    ]
    return all(r.passed for r in reports), reports
