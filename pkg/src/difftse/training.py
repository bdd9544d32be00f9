"""Training objectives and optimization.

Score matching uses the transition score as target.  For t < T the loss is

    || s(x_t, y, c, t) + z/sigma(t) ||^2,   x_t = mean(t) + sigma(t) z,

and at t = T, where inference will start from x_T ~ N(y, sigma(T)^2 I), the
modified objective

    || s(x_T, y, c, T) + z/sigma(T) + e^{-gamma T} (x0 - y)/sigma(T)^2 ||^2

with x_T = y + sigma(T) z.  Process times are drawn t = T with probability
delta_T, otherwise uniformly on [t_eps, T).  The discriminative branch
minimizes -SNR(x0, x_hat); the multi-task total is
alpha * J_snr + beta * J_score.

Per-step randomness is derived from SeedSequence([seed, step]) with one
child per batch slot, so results do not depend on evaluation order and a
run is bit-reproducible given (seed, config, corpus).
"""

import time
from dataclasses import dataclass

import numpy as np

from . import sde
from .backends import adam_ema_step
from .errors import ContractError, DomainError
from .models import DiffTseMt, TseNet

LN10 = float(np.log(10.0))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    delta_T: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    ema_decay: float = 0.999
    batch_size: int = 8
    steps: int = 2000
    t_eps: float = sde.T_EPS
    snr_cap: float = 50.0
    grad_clip: float = 500.0
    mt_cond_ratio: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.delta_T <= 1.0):
            raise DomainError(f"delta_T must be in [0, 1], got {self.delta_T}")
        if self.lr <= 0:
            raise DomainError(f"lr must be > 0, got {self.lr}")
        if self.alpha < 0 or self.beta < 0:
            raise DomainError("multi-task weights must be >= 0")
        if self.batch_size < 0:
            raise DomainError("batch_size must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise DomainError("grad_clip must be positive or None")


@dataclass
class LossReport:
    score_loss: float
    snr_loss: float
    total: float
    t_drawn: float
    was_terminal: bool
    step: int = 0
    wall_ms: float = 0.0
    aborted: bool = False


def draw_time(cfg: TrainConfig, p: sde.SdeParams, rng: np.random.Generator) -> float:
    """t = T with probability delta_T, else uniform on [t_eps, T)."""
    if rng.random() < cfg.delta_T:
        return p.t_max
    return cfg.t_eps + (p.t_max - cfg.t_eps) * rng.random()


def _sq_norm(x) -> float:
    return float(np.sum(x.real ** 2) + np.sum(x.imag ** 2))


def interior_noise_state(x0, y, t, p, rng):
    """(x_t, z, residual target offset) for the 0 <= t < T objective."""
    xt, z = sde.sample_xt(x0, y, t, p, rng)
    return xt, z, z / sde.sigma(t, p)


def terminal_noise_state(x0, y, p, rng):
    """(x_T, z, residual target offset) for the t = T objective.

    x_T is drawn around the mixture itself, matching how inference starts,
    and the offset gains the mean-mismatch correction term.
    """
    sT = sde.sigma(p.t_max, p)
    z = sde.standard_complex_noise(rng, np.asarray(x0).shape)
    xT = y + sT * z
    offset = z / sT + sde.mean_weight(p.t_max, p) * (x0 - y) / (sT * sT)
    return xT, z, offset


def score_loss_interior(model, x0, y, c, t, p: sde.SdeParams,
                        rng: np.random.Generator) -> float:
    """Squared-norm score-matching loss at an interior time (no gradient).

    Times at or beyond T are routed to the terminal objective.
    """
    if t >= p.t_max:
        return score_loss_terminal(model, x0, y, c, rng, p)
    if t <= 0.0:
        raise DomainError(f"interior loss needs t > 0, got t={t}")
    xt, _, offset = interior_noise_state(x0, y, t, p, rng)
    s = model.score(xt, y, c, t)
    return _sq_norm(s + offset)


def score_loss_terminal(model, x0, y, c, rng: np.random.Generator,
                        p: sde.SdeParams) -> float:
    """Squared-norm score-matching loss at the terminal time (no gradient)."""
    xT, _, offset = terminal_noise_state(x0, y, p, rng)
    s = model.score(xT, y, c, p.t_max)
    return _sq_norm(s + offset)


def snr_loss(x0, xhat, cap: float = 50.0) -> float:
    """Negative SNR in dB between clean target and estimate, clamped."""
    x0 = np.asarray(x0)
    xhat = np.asarray(xhat)
    p_ref = _sq_norm(x0)
    if p_ref == 0.0:
        raise ContractError("zero reference signal")
    p_err = _sq_norm(x0 - xhat)
    if p_err == 0.0:
        return -cap
    val = -10.0 * np.log10(p_ref / p_err)
    return float(np.clip(val, -cap, cap))


def _snr_loss_grad(x0, xhat, cap: float = 50.0):
    """(loss, gradient wrt xhat) for the clamped negative SNR."""
    loss = snr_loss(x0, xhat, cap)
    if abs(loss) >= cap:
        return loss, np.zeros_like(xhat)
    err = xhat - x0
    p_err = _sq_norm(err)
    return loss, (20.0 / (LN10 * p_err)) * err


def sample_batch(corpus, batch_size: int, rng: np.random.Generator):
    """Draw examples speaker-first: a target speaker uniformly, then one of
    that speaker's examples uniformly."""
    corpus = list(corpus)
    if not corpus:
        raise ContractError("empty corpus")
    by_speaker = {}
    for ex in corpus:
        by_speaker.setdefault(ex.target_id, []).append(ex)
    speakers = sorted(by_speaker)
    out = []
    for _ in range(batch_size):
        spk = speakers[int(rng.integers(len(speakers)))]
        pool = by_speaker[spk]
        out.append(pool[int(rng.integers(len(pool)))])
    return out


class AdamEma:
    """Adam with bias correction plus an EMA shadow of the parameters.

    The shadow, updated as ema <- decay*ema + (1-decay)*params after each
    step, is what inference should load.
    """

    def __init__(self, params, lr: float, ema_decay: float = 0.999,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.ema_decay = ema_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.ema = [p.values.copy() for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            adam_ema_step(
                p.values, p.grads, self.m[i], self.v[i], self.ema[i],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
                self.ema_decay,
            )

    def ema_state(self):
        return {p.name: e.copy() for p, e in zip(self.params, self.ema)}

    def load_ema_into_params(self):
        for p, e in zip(self.params, self.ema):
            p.values[...] = e


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    The raw score loss carries a 1/sigma(t)^2 weight whose scale spans
    several orders of magnitude across drawn times; clipping keeps the
    occasional near-t_eps draw from swamping the adaptive moments.
    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        total += float(np.sum(p.grads ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            p.grads *= scale
    return norm


def _equalize_example_grads(g_out: np.ndarray, factor: float = 4.0) -> np.ndarray:
    """Cap each example's output-space gradient at factor * batch median.

    The score objective weights examples by 1/sigma(t)^2; a single draw
    near t_eps otherwise carries a gradient orders of magnitude larger
    than the rest of the batch and starves the informative mid-range
    times.  Loss values are never touched, only the backpropagated
    direction's per-example magnitudes.
    """
    B = g_out.shape[0]
    norms = np.sqrt([
        float(np.sum(g_out[i].real ** 2) + np.sum(g_out[i].imag ** 2))
        for i in range(B)
    ])
    med = float(np.median(norms))
    if med <= 0.0:
        return g_out
    cap = factor * med
    scale = np.minimum(1.0, cap / np.maximum(norms, 1e-300))
    return g_out * scale[:, None, None]


def _batch_states(batch, cfg, p, step_children):
    """Draw per-example (t, x_t, z-offset) states with per-slot generators."""
    ts, xts, offsets, terminal = [], [], [], []
    for i, ex in enumerate(batch):
        rng = np.random.Generator(np.random.PCG64(step_children[i]))
        t = draw_time(cfg, p, rng)
        if t >= p.t_max:
            xt, _, off = terminal_noise_state(ex.x0, ex.y, p, rng)
            terminal.append(True)
        else:
            xt, _, off = interior_noise_state(ex.x0, ex.y, t, p, rng)
            terminal.append(False)
        ts.append(t)
        xts.append(xt)
        offsets.append(off)
    return (np.array(ts), np.stack(xts), np.stack(offsets), terminal)


def train_step(model, batch, cfg: TrainConfig, p: sde.SdeParams,
               optimizer: AdamEma, step: int) -> LossReport:
    """One optimizer step on a batch; dispatches on the model variant.

    Gradients are averaged over the batch so the learning rate does not
    scale with batch size.  A non-finite loss aborts the step (parameters
    untouched) and is flagged in the report.
    """
    t0 = time.perf_counter()
    B = len(batch)
    if B == 0:
        return LossReport(0.0, 0.0, 0.0, 0.0, False, step=step)
    ss = np.random.SeedSequence([cfg.seed, step])
    children = ss.spawn(B)
    model.zero_grads()

    x0 = np.stack([ex.x0 for ex in batch])
    y = np.stack([ex.y for ex in batch])
    c = np.stack([ex.c for ex in batch])

    if isinstance(model, TseNet):
        xhat = model.forward_train(y, c)
        losses, grads = [], []
        for i in range(B):
            li, gi = _snr_loss_grad(x0[i], xhat[i], cfg.snr_cap)
            losses.append(li)
            grads.append(gi)
        snr = float(np.mean(losses))
        if not np.isfinite(snr):
            return LossReport(0.0, snr, snr, 0.0, False, step=step, aborted=True)
        model.backward(np.stack(grads) / B)
        if cfg.grad_clip:
            clip_gradients(model.params(), cfg.grad_clip)
        optimizer.step()
        return LossReport(0.0, snr, snr, 0.0, False, step=step,
                          wall_ms=(time.perf_counter() - t0) * 1e3)

    ts, xts, offsets, terminal = _batch_states(batch, cfg, p, children)

    if isinstance(model, DiffTseMt):
        s, xhat = model.score_and_estimate(xts, y, c, ts)
        resid = s + offsets
        score_l = float(np.mean([_sq_norm(resid[i]) for i in range(B)]))
        snr_ls, snr_gs = [], []
        for i in range(B):
            li, gi = _snr_loss_grad(x0[i], xhat[i], cfg.snr_cap)
            snr_ls.append(li)
            snr_gs.append(gi)
        snr_l = float(np.mean(snr_ls))
        total = cfg.alpha * snr_l + cfg.beta * score_l
        if not np.isfinite(total):
            return LossReport(score_l, snr_l, total, float(np.mean(ts)),
                              any(terminal), step=step, aborted=True)
        g_score = _equalize_example_grads(cfg.beta * 2.0 * resid / B)
        g_xhat = cfg.alpha * np.stack(snr_gs) / B
        # The raw score objective sits several orders of magnitude above
        # the SNR term at this scale.  Two stabilizers, neither touching
        # the reported losses: the score gradient entering the estimate is
        # capped per example at mt_cond_ratio times the SNR gradient's own
        # norm, and the two terms are backpropagated separately with the
        # same global-norm ceiling.
        params = model.params()
        cond_cap = None
        if cfg.alpha != 0.0 and cfg.mt_cond_ratio is not None:
            cond_cap = cfg.mt_cond_ratio * np.sqrt(np.array([
                float(np.sum(g_xhat[i].real ** 2) + np.sum(g_xhat[i].imag ** 2))
                for i in range(B)
            ]))
        model.backward(g_score, None, cond_cap=cond_cap)
        if cfg.grad_clip:
            clip_gradients(params, cfg.grad_clip)
        if cfg.alpha != 0.0:
            saved = [pp.grads.copy() for pp in params]
            model.zero_grads()
            model.backward(None, g_xhat)
            if cfg.grad_clip:
                clip_gradients(params, cfg.grad_clip)
            for pp, s in zip(params, saved):
                pp.grads += s
        optimizer.step()
        return LossReport(score_l, snr_l, total, float(np.mean(ts)),
                          any(terminal), step=step,
                          wall_ms=(time.perf_counter() - t0) * 1e3)

    # Plain score model (Diff-TSE).
    s = model.score(xts, y, c, ts)
    resid = s + offsets
    score_l = float(np.mean([_sq_norm(resid[i]) for i in range(B)]))
    if not np.isfinite(score_l):
        return LossReport(score_l, 0.0, score_l, float(np.mean(ts)),
                          any(terminal), step=step, aborted=True)
    model.backward(_equalize_example_grads(2.0 * resid / B))
    if cfg.grad_clip:
        clip_gradients(model.params(), cfg.grad_clip)
    optimizer.step()
    return LossReport(score_l, 0.0, score_l, float(np.mean(ts)),
                      any(terminal), step=step,
                      wall_ms=(time.perf_counter() - t0) * 1e3)


def multitask_step(model: DiffTseMt, batch, cfg: TrainConfig,
                   p: sde.SdeParams, optimizer: AdamEma,
                   step: int) -> LossReport:
    """Multi-task step: total = alpha * J_snr + beta * J_score."""
    if not isinstance(model, DiffTseMt):
        raise ContractError("multitask_step needs a Diff-TSE-MT model")
    return train_step(model, batch, cfg, p, optimizer, step)


def train_model(model, corpus, cfg: TrainConfig, p: sde.SdeParams,
                log_fn=None):
    """Full training loop; returns (optimizer, reports).

    Batch selection draws from a dedicated child generator per step, and
    each batch slot owns its own generator, so the run is reproducible
    bit-for-bit given (seed, config, corpus) and independent of evaluation
    order.
    """
    corpus = list(corpus)
    if not corpus:
        raise ContractError("empty corpus")
    by_speaker = {}
    for ex in corpus:
        by_speaker.setdefault(ex.target_id, []).append(ex)
    speakers = sorted(by_speaker)

    optimizer = AdamEma(model.params(), lr=cfg.lr, ema_decay=cfg.ema_decay)
    reports = []
    for step in range(1, cfg.steps + 1):
        pick = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed, step, 0xB]))
        )
        batch = []
        for _ in range(cfg.batch_size):
            spk = speakers[int(pick.integers(len(speakers)))]
            pool = by_speaker[spk]
            batch.append(pool[int(pick.integers(len(pool)))])
        rep = train_step(model, batch, cfg, p, optimizer, step)
        reports.append(rep)
        if log_fn is not None:
            log_fn(rep)
    return optimizer, reports
