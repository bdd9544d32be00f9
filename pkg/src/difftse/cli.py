"""Command-line surface: gen, train, extract, eval, verify.

Every artifact-producing command echoes its fully resolved configuration
into the output directory; re-running with that file and the same seed
reproduces outputs bit for bit.

Exit codes: 0 success, 2 verification failure, 3 bad configuration or
arguments, 4 missing file, 5 corrupt or inconsistent data.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .config import (
    MODEL_VARIANTS,
    RunConfig,
    load_config,
    render_config,
    write_config,
)
from .corpus import (
    gen_corpus,
    linear_stft_config,
    read_corpus,
    write_corpus,
    write_spec,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    CorpusError,
    DomainError,
)
from .evaluate import clue_swap_eval, evaluate_extraction, write_eval_report
from .metrics import istft, read_wav, stft, write_wav
from .models import build_model, load_model, save_model
from .sampling import extract_ensemble
from .training import train_model
from . import verify as verify_mod

EXIT_OK = 0
EXIT_VERIFY_FAILED = 2
EXIT_BAD_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_DATA_ERROR = 5


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="difftse",
        description="Conditional diffusion target speech extraction, desk scale.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file (key = value sections)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--jobs", type=int, help="worker cap for parallel parts")
        sp.add_argument("--model", choices=MODEL_VARIANTS,
                        help="model variant")
        sp.add_argument("--ensemble", type=int, metavar="J",
                        help="ensemble size")
        sp.add_argument("--steps", type=int, metavar="N",
                        help="sampler prediction steps")

    g = sub.add_parser("gen", help="generate the synthetic corpus")
    common(g)
    g.add_argument("--out", required=True, help="corpus directory to create")

    t = sub.add_parser("train", help="train a model on a corpus")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--train-steps", type=int, help="optimizer step count")

    e = sub.add_parser("extract", help="extract a target from a mixture")
    common(e)
    e.add_argument("--checkpoint", required=True,
                   help="model path prefix (expects .model/.params)")
    e.add_argument("--mixture", help="mixture WAV")
    e.add_argument("--enroll", help="enrollment WAV of the target speaker")
    e.add_argument("--corpus", help="corpus dir (use with --example)")
    e.add_argument("--example", type=int,
                   help="test-example index inside --corpus")
    e.add_argument("--out", required=True)
    e.add_argument("--trace", action="store_true",
                   help="dump per-step state snapshots")

    v = sub.add_parser("eval", help="evaluate extraction metrics on a corpus")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--subset", type=int, help="evaluate first K test examples")
    v.add_argument("--internal", action="store_true",
                   help="evaluate the discriminative branch of a multi-task model")
    v.add_argument("--clue-swap", action="store_true",
                   help="also run the swapped-clue evaluation")

    w = sub.add_parser("verify", help="run the analytic oracle suites")
    common(w)
    w.add_argument("--quick", action="store_true",
                   help="reduced path/sample counts")
    return ap


def _resolve(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.corpus = dataclasses.replace(cfg.corpus, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.sampler = dataclasses.replace(cfg.sampler, seed=args.seed)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.model is not None:
        cfg.model_variant = args.model
    if args.ensemble is not None:
        cfg.sampler = dataclasses.replace(cfg.sampler, ensemble=args.ensemble)
    if args.steps is not None:
        cfg.sampler = dataclasses.replace(cfg.sampler, n_steps=args.steps)
    if getattr(args, "train_steps", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, steps=args.train_steps)
    return cfg


def _echo(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.txt"))
    sys.stdout.write(render_config(cfg))
    sys.stdout.write("\n")


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    _echo(cfg, args.out)
    corpus = gen_corpus(cfg.corpus)
    write_corpus(corpus, args.out)
    print(f"wrote corpus ({len(corpus.train)} train / {len(corpus.test)} test, "
          f"{len(corpus.speakers)} speakers) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    corpus = read_corpus(args.corpus)
    _echo(cfg, args.out)
    F = corpus.train[0].y.shape[0]
    model = build_model(cfg.model_variant, cfg.model_config(F), cfg.sde,
                        seed=cfg.seed)
    log_path = os.path.join(args.out, "train.log")
    ckpt_dir = args.out

    with open(log_path, "w") as log:
        def log_fn(rep):
            log.write(
                f"{rep.step} {rep.t_drawn:.6f} {rep.score_loss:.6e} "
                f"{rep.snr_loss:.6e} {rep.total:.6e} {rep.wall_ms:.3f}\n"
            )

        optimizer, _ = train_model(model, corpus.train, cfg.train, cfg.sde,
                                   log_fn=_CheckpointingLogger(
                                       log_fn, model, cfg, ckpt_dir))
    # Final checkpoint carries the EMA parameters used for inference.
    optimizer.load_ema_into_params()
    save_model(model, os.path.join(ckpt_dir, "final"))
    print(f"trained {cfg.train.steps} steps; checkpoint at "
          f"{os.path.join(ckpt_dir, 'final')}.params")
    return EXIT_OK


class _CheckpointingLogger:
    """Wraps the per-step logger and snapshots EMA weights every K steps."""

    def __init__(self, log_fn, model, cfg, out_dir):
        self.log_fn = log_fn
        self.model = model
        self.cfg = cfg
        self.out_dir = out_dir
        self._optimizer = None

    def __call__(self, rep):
        self.log_fn(rep)
        every = self.cfg.train.checkpoint_every
        if every and rep.step % every == 0 and rep.step < self.cfg.train.steps:
            # Snapshot current (non-EMA) weights; cheap desk-scale restart aid.
            save_model(self.model,
                       os.path.join(self.out_dir, f"step{rep.step:06d}"))


def _load_example_inputs(args, stft_cfg):
    if args.corpus and args.example is not None:
        corpus = read_corpus(args.corpus)
        ex = corpus.test[args.example]
        n = int(round(corpus.config.duration_s * corpus.config.sample_rate))
        return ex.y, ex.c, n, stft_cfg.sample_rate
    if not (args.mixture and args.enroll):
        raise ConfigError(
            "extract needs either --mixture and --enroll WAVs or "
            "--corpus with --example"
        )
    for path in (args.mixture, args.enroll):
        if not os.path.exists(path):
            raise FileNotFoundError(path)
    mix = read_wav(args.mixture)
    enr = read_wav(args.enroll)
    y = stft(mix.samples.astype(np.float64), stft_cfg)
    c = stft(enr.samples.astype(np.float64), stft_cfg)
    return y, c, mix.samples.size, mix.sample_rate


def cmd_extract(args) -> int:
    cfg = _resolve(args)
    for suffix in (".model", ".params"):
        if not os.path.exists(args.checkpoint + suffix):
            raise FileNotFoundError(args.checkpoint + suffix)
    model = load_model(args.checkpoint)
    _echo(cfg, args.out)
    stft_cfg = linear_stft_config(cfg.stft.sample_rate)
    y, c, n_samples, rate = _load_example_inputs(args, stft_cfg)

    samp = cfg.sampler
    if args.trace:
        samp = dataclasses.replace(samp, keep_trace=True)
    if model.variant == "tse":
        xhat = model.extract(y, c)
        write_wav(os.path.join(args.out, "extracted.wav"),
                  istft(xhat, stft_cfg, n_samples), rate)
        print("wrote extracted.wav (single-pass discriminative model)")
        return EXIT_OK

    ens, traces = extract_ensemble(y, c, model, cfg.sde, samp)
    write_wav(os.path.join(args.out, "extracted.wav"),
              istft(ens, stft_cfg, n_samples), rate)
    for j, tr in enumerate(traces):
        write_wav(os.path.join(args.out, f"sample{j:02d}.wav"),
                  istft(tr.final, stft_cfg, n_samples), rate)
        if args.trace:
            tdir = os.path.join(args.out, f"trace{j:02d}")
            os.makedirs(tdir, exist_ok=True)
            for si, state in enumerate(tr.states):
                write_spec(os.path.join(tdir, f"step{si:03d}.spec"), state)
    print(f"wrote extracted.wav (ensemble of {samp.ensemble}) and "
          f"{len(traces)} per-sample WAVs")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    for suffix in (".model", ".params"):
        if not os.path.exists(args.checkpoint + suffix):
            raise FileNotFoundError(args.checkpoint + suffix)
    model = load_model(args.checkpoint)
    corpus = read_corpus(args.corpus)
    _echo(cfg, args.out)

    if args.internal:
        if model.variant != "diff-tse-mt":
            raise ConfigError("--internal needs a diff-tse-mt checkpoint")
        mode = "internal"
    elif model.variant == "tse":
        mode = "direct"
    else:
        mode = "diffusion"
    result = evaluate_extraction(
        model, corpus, cfg.sde, cfg.sampler, subset=args.subset,
        jobs=cfg.jobs, mode=mode,
    )
    paths = write_eval_report(result, args.out)
    agg = result.aggregate()
    print("aggregate:", " ".join(
        f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
        for k, v in agg.items()
    ))
    if args.clue_swap:
        frac, rows = clue_swap_eval(
            model, corpus, cfg.sde, cfg.sampler, subset=args.subset,
            jobs=cfg.jobs, mode=mode,
        )
        swap_path = os.path.join(args.out, "clue_swap.csv")
        with open(swap_path, "w") as f:
            f.write("example,sisdr_vs_target,sisdr_vs_interferer\n")
            for idx, vt, vi in rows:
                f.write(f"{idx},{vt:.4f},{vi:.4f}\n")
        print(f"clue-swap: interferer wins in {frac * 100:.1f}% of examples")
    print("reports:", ", ".join(paths))
    return EXIT_OK


def cmd_verify(args) -> int:
    ok, reports = verify_mod.run_all(quick=args.quick)
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"[{status}] {rep.name} ({rep.elapsed_s:.1f}s)")
        for line in rep.lines:
            print(f"    {line}")
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "extract":
            return cmd_extract(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "verify":
            return cmd_verify(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ConfigError, DomainError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except (CorpusError, CheckpointError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
