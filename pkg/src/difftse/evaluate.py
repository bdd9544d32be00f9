"""Extraction quality evaluation over a test corpus.

Produces per-example and aggregate SI-SDR / SI-SDRi, with one column per
generated sample and one for the ensemble combination, plus a scatter file
of per-sample points for plotting.

Chains for a whole group of test examples run as one batch through the
model; every chain owns a generator derived from (master seed, example
index, sample index), so results are independent of grouping and of the
--jobs worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import sde
from .corpus import Corpus, linear_stft_config, swap_enrollment
from .errors import ContractError
from .metrics import istft, si_sdr
from .sampling import SamplerConfig, run_chains


@dataclass
class ExampleResult:
    index: int
    target_id: int
    interferer_id: int
    sisdr_mix: float
    sample_sisdr: list = field(default_factory=list)
    ensemble_sisdr: float = float("nan")

    @property
    def sample_sisdri_mean(self) -> float:
        return float(np.mean(self.sample_sisdr)) - self.sisdr_mix

    @property
    def ensemble_sisdri(self) -> float:
        return self.ensemble_sisdr - self.sisdr_mix


@dataclass
class EvalResult:
    mode: str
    ensemble: int
    rows: list

    def aggregate(self) -> dict:
        out = {
            "examples": len(self.rows),
            "sisdr_mix": float(np.mean([r.sisdr_mix for r in self.rows])),
            "sample_sisdr": float(np.mean(
                [np.mean(r.sample_sisdr) for r in self.rows]
            )),
            "sample_sisdri": float(np.mean(
                [r.sample_sisdri_mean for r in self.rows]
            )),
        }
        if self.ensemble > 1:
            out["ensemble_sisdr"] = float(np.mean(
                [r.ensemble_sisdr for r in self.rows]
            ))
            out["ensemble_sisdri"] = float(np.mean(
                [r.ensemble_sisdri for r in self.rows]
            ))
        return out


def _chain_seed(master: int, example_index: int, j: int):
    return np.random.SeedSequence([int(master), int(example_index), int(j)])


def _combine(finals: np.ndarray, mode: str) -> np.ndarray:
    total = finals.sum(axis=0)
    return total / finals.shape[0] if mode == "mean" else total


def evaluate_extraction(model, corpus: Corpus, p: sde.SdeParams,
                        samp: SamplerConfig, subset: int | None = None,
                        jobs: int = 1, mode: str = "diffusion",
                        group_size: int = 8) -> EvalResult:
    """Evaluate a model over the corpus test split.

    mode "diffusion" samples with the PC sampler (J per SamplerConfig);
    "direct" calls the model's single-pass extract; "internal" evaluates
    the discriminative branch of a multi-task model.
    """
    examples = corpus.test if subset is None else corpus.test[:subset]
    if not examples:
        raise ContractError("no test examples to evaluate")
    scfg = linear_stft_config(corpus.config.sample_rate)
    n = int(round(corpus.config.duration_s * corpus.config.sample_rate))
    J = samp.ensemble

    def eval_group(group):
        rows = []
        if mode == "diffusion":
            ys = np.stack([ex.y for ex in group for _ in range(J)])
            cs = np.stack([ex.c for ex in group for _ in range(J)])
            seeds = [
                _chain_seed(samp.seed, ex.index, j)
                for ex in group for j in range(J)
            ]
            traces = run_chains(ys, cs, model, p, samp, seeds)
            finals = np.stack([tr.final for tr in traces])
        for gi, ex in enumerate(group):
            ref = ex.x0_wav.astype(np.float64)
            mix = ex.y_wav.astype(np.float64)
            row = ExampleResult(
                index=ex.index, target_id=ex.target_id,
                interferer_id=ex.interferer_id,
                sisdr_mix=si_sdr(ref, mix),
            )
            if mode == "diffusion":
                fin = finals[gi * J:(gi + 1) * J]
                row.sample_sisdr = [
                    si_sdr(ref, istft(f, scfg, n)) for f in fin
                ]
                row.ensemble_sisdr = si_sdr(
                    ref, istft(_combine(fin, samp.combine), scfg, n)
                )
            else:
                if mode == "direct":
                    xhat = model.extract(ex.y, ex.c)
                elif mode == "internal":
                    xhat = model.extract_discriminative(ex.y, ex.c)
                else:
                    raise ContractError(f"unknown eval mode {mode!r}")
                v = si_sdr(ref, istft(xhat, scfg, n))
                row.sample_sisdr = [v]
                row.ensemble_sisdr = v
            rows.append(row)
        return rows

    groups = [examples[i:i + group_size]
              for i in range(0, len(examples), group_size)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(eval_group, groups))
    else:
        chunks = [eval_group(g) for g in groups]
    rows = [r for chunk in chunks for r in chunk]
    return EvalResult(mode=mode, ensemble=J if mode == "diffusion" else 1,
                      rows=rows)


def clue_swap_eval(model, corpus: Corpus, p: sde.SdeParams,
                   samp: SamplerConfig, subset: int | None = None,
                   jobs: int = 1, mode: str = "diffusion",
                   group_size: int = 8):
    """Extract with the interferer's enrollment as the clue.

    Returns (fraction of examples where the extraction is closer to the
    interferer than to the target, per-example rows).  Single-sample
    extraction (no ensemble) keeps this the harsher test.
    """
    examples = corpus.test if subset is None else corpus.test[:subset]
    scfg = linear_stft_config(corpus.config.sample_rate)
    n = int(round(corpus.config.duration_s * corpus.config.sample_rate))

    def eval_group(group):
        swaps = [swap_enrollment(corpus, ex) for ex in group]
        if mode == "diffusion":
            ys = np.stack([ex.y for ex in group])
            cs = np.stack(swaps)
            seeds = [_chain_seed(samp.seed, ex.index, 0xC) for ex in group]
            traces = run_chains(ys, cs, model, p, replace(samp, ensemble=1),
                                seeds)
            xhats = [tr.final for tr in traces]
        elif mode == "direct":
            xhats = [model.extract(ex.y, cs_) for ex, cs_ in zip(group, swaps)]
        else:
            xhats = [model.extract_discriminative(ex.y, cs_)
                     for ex, cs_ in zip(group, swaps)]
        out = []
        for ex, xh in zip(group, xhats):
            w = istft(xh, scfg, n)
            vs_target = si_sdr(ex.x0_wav.astype(np.float64), w)
            vs_interferer = si_sdr(ex.xi_wav.astype(np.float64), w)
            out.append((ex.index, vs_target, vs_interferer))
        return out

    groups = [examples[i:i + group_size]
              for i in range(0, len(examples), group_size)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(eval_group, groups))
    else:
        chunks = [eval_group(g) for g in groups]
    rows = [r for chunk in chunks for r in chunk]
    frac = float(np.mean([1.0 if vi > vt else 0.0 for _, vt, vi in rows]))
    return frac, rows


def write_eval_report(result: EvalResult, out_dir, prefix: str = "metrics"):
    """metrics.txt (human), metrics.csv, and a per-sample scatter file."""
    os.makedirs(out_dir, exist_ok=True)
    agg = result.aggregate()
    has_ens = result.ensemble > 1

    csv_path = os.path.join(out_dir, f"{prefix}.csv")
    with open(csv_path, "w") as f:
        cols = ["example", "target", "interferer", "sisdr_mix",
                "sample_sisdr_mean", "sample_sisdri_mean"]
        if has_ens:
            cols += ["ensemble_sisdr", "ensemble_sisdri"]
        f.write(",".join(cols) + "\n")
        for r in result.rows:
            vals = [r.index, r.target_id, r.interferer_id,
                    f"{r.sisdr_mix:.4f}",
                    f"{np.mean(r.sample_sisdr):.4f}",
                    f"{r.sample_sisdri_mean:.4f}"]
            if has_ens:
                vals += [f"{r.ensemble_sisdr:.4f}", f"{r.ensemble_sisdri:.4f}"]
            f.write(",".join(str(v) for v in vals) + "\n")
        mean_vals = ["mean", "", "", f"{agg['sisdr_mix']:.4f}",
                     f"{agg['sample_sisdr']:.4f}", f"{agg['sample_sisdri']:.4f}"]
        if has_ens:
            mean_vals += [f"{agg['ensemble_sisdr']:.4f}",
                          f"{agg['ensemble_sisdri']:.4f}"]
        f.write(",".join(mean_vals) + "\n")

    txt_path = os.path.join(out_dir, f"{prefix}.txt")
    with open(txt_path, "w") as f:
        f.write(f"mode={result.mode} samples_per_example={result.ensemble}\n")
        hdr = f"{'example':>8} {'mix':>8} {'sample':>8} {'sisdri':>8}"
        if has_ens:
            hdr += f" {'ens':>8} {'ens_i':>8}"
        f.write(hdr + "\n")
        for r in result.rows:
            line = (f"{r.index:>8d} {r.sisdr_mix:>8.2f} "
                    f"{np.mean(r.sample_sisdr):>8.2f} "
                    f"{r.sample_sisdri_mean:>8.2f}")
            if has_ens:
                line += f" {r.ensemble_sisdr:>8.2f} {r.ensemble_sisdri:>8.2f}"
            f.write(line + "\n")
        f.write("aggregate: " + " ".join(
            f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
            for k, v in agg.items()) + "\n")

    scatter_path = os.path.join(out_dir, f"{prefix}_scatter.csv")
    with open(scatter_path, "w") as f:
        f.write("example,kind,sisdri\n")
        for r in result.rows:
            for j, v in enumerate(r.sample_sisdr):
                f.write(f"{r.index},sample{j},{v - r.sisdr_mix:.4f}\n")
            if has_ens:
                f.write(f"{r.index},ensemble,{r.ensemble_sisdri:.4f}\n")
    return csv_path, txt_path, scatter_path
