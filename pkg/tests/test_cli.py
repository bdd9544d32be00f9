"""End-to-end command-line runs with tiny configurations."""

import os

import numpy as np
import pytest

from difftse.cli import (
    EXIT_BAD_CONFIG,
    EXIT_DATA_ERROR,
    EXIT_MISSING_FILE,
    EXIT_OK,
    main,
)
from difftse.config import RunConfig, load_config, parse_config_text
from difftse.errors import ConfigError
from difftse.corpus import read_corpus
from difftse.models import ModelConfig, TseNet, save_model

TINY_CONFIG = """
[corpus]
n_train = 10
n_test = 6
seed = 5

[train]
lr = 1e-3
steps = 12
batch_size = 4
checkpoint_every = 6
seed = 5

[sampler]
n_steps = 6
ensemble = 2
seed = 5

[run]
model = diff-tse
width = 8
blocks = 1
embed_dim = 4
seed = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(TINY_CONFIG)
    corpus_dir = root / "corpus"
    rc = main(["gen", "--config", str(cfg_path), "--out", str(corpus_dir)])
    assert rc == EXIT_OK
    train_dir = root / "train"
    rc = main(["train", "--config", str(cfg_path), "--corpus",
               str(corpus_dir), "--out", str(train_dir)])
    assert rc == EXIT_OK
    return root, cfg_path, corpus_dir, train_dir


def test_gen_outputs(workdir):
    root, _, corpus_dir, _ = workdir
    assert (corpus_dir / "manifest.txt").exists()
    assert (corpus_dir / "config.txt").exists()
    corpus = read_corpus(corpus_dir)
    assert len(corpus.train) == 10 and len(corpus.test) == 6


def test_gen_rerun_bit_identical(workdir, tmp_path):
    _, cfg_path, corpus_dir, _ = workdir
    other = tmp_path / "corpus2"
    assert main(["gen", "--config", str(cfg_path), "--out", str(other)]) == EXIT_OK
    for name in sorted(os.listdir(corpus_dir)):
        a = (corpus_dir / name).read_bytes()
        b = (other / name).read_bytes()
        assert a == b, name


def test_train_outputs_and_rerun_bit_identical(workdir, tmp_path):
    _, cfg_path, corpus_dir, train_dir = workdir
    assert (train_dir / "final.params").exists()
    assert (train_dir / "final.model").exists()
    assert (train_dir / "step000006.params").exists()
    log_lines = (train_dir / "train.log").read_text().strip().splitlines()
    assert len(log_lines) == 12
    assert all(len(ln.split()) == 6 for ln in log_lines)

    rerun = tmp_path / "train2"
    assert main(["train", "--config", str(cfg_path), "--corpus",
                 str(corpus_dir), "--out", str(rerun)]) == EXIT_OK
    assert (rerun / "final.params").read_bytes() == \
        (train_dir / "final.params").read_bytes()


def test_train_rerun_from_echoed_config(workdir, tmp_path):
    _, _, corpus_dir, train_dir = workdir
    echoed = train_dir / "config.txt"
    rerun = tmp_path / "train3"
    assert main(["train", "--config", str(echoed), "--corpus",
                 str(corpus_dir), "--out", str(rerun)]) == EXIT_OK
    assert (rerun / "final.params").read_bytes() == \
        (train_dir / "final.params").read_bytes()


def test_extract_corpus_example(workdir, tmp_path):
    _, cfg_path, corpus_dir, train_dir = workdir
    out1 = tmp_path / "ex1"
    rc = main(["extract", "--config", str(cfg_path),
               "--checkpoint", str(train_dir / "final"),
               "--corpus", str(corpus_dir), "--example", "0",
               "--out", str(out1), "--trace"])
    assert rc == EXIT_OK
    assert (out1 / "extracted.wav").exists()
    assert (out1 / "sample00.wav").exists()
    assert (out1 / "sample01.wav").exists()
    assert (out1 / "trace00" / "step000.spec").exists()
    out2 = tmp_path / "ex2"
    rc = main(["extract", "--config", str(cfg_path),
               "--checkpoint", str(train_dir / "final"),
               "--corpus", str(corpus_dir), "--example", "0",
               "--out", str(out2)])
    assert rc == EXIT_OK
    assert (out1 / "extracted.wav").read_bytes() == \
        (out2 / "extracted.wav").read_bytes()


def test_extract_wav_inputs(workdir, tmp_path):
    _, cfg_path, corpus_dir, train_dir = workdir
    out = tmp_path / "exw"
    rc = main(["extract", "--config", str(cfg_path),
               "--checkpoint", str(train_dir / "final"),
               "--mixture", str(corpus_dir / "test00000.y.wav"),
               "--enroll", str(corpus_dir / "test00000.c.wav"),
               "--out", str(out), "--ensemble", "1"])
    assert rc == EXIT_OK
    assert (out / "extracted.wav").exists()


def test_eval_reports_and_parallel_equals_serial(workdir, tmp_path):
    _, cfg_path, corpus_dir, train_dir = workdir
    outs = []
    for jobs, tag in ((1, "e1"), (2, "e2")):
        out = tmp_path / tag
        rc = main(["eval", "--config", str(cfg_path),
                   "--checkpoint", str(train_dir / "final"),
                   "--corpus", str(corpus_dir), "--out", str(out),
                   "--jobs", str(jobs), "--clue-swap"])
        assert rc == EXIT_OK
        outs.append(out)
    a = (outs[0] / "metrics.csv").read_text()
    b = (outs[1] / "metrics.csv").read_text()
    assert a == b
    assert (outs[0] / "clue_swap.csv").read_text() == \
        (outs[1] / "clue_swap.csv").read_text()
    assert (outs[0] / "metrics_scatter.csv").exists()
    assert (outs[0] / "metrics.txt").exists()

    # Aggregate row equals the mean of the per-example rows.
    lines = a.strip().splitlines()
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:-1]]
    mean_row = lines[-1].split(",")
    col = header.index("sample_sisdri_mean")
    recomputed = np.mean([float(r[col]) for r in rows])
    assert abs(recomputed - float(mean_row[col])) < 5e-4


def test_eval_mixture_passthrough_model(workdir, tmp_path):
    # A discriminative model with a zeroed head passes the mixture
    # through unchanged, so every improvement entry is exactly 0 dB.
    _, cfg_path, corpus_dir, _ = workdir
    corpus = read_corpus(corpus_dir)
    F = corpus.train[0].y.shape[0]
    model = TseNet(ModelConfig(n_freq=F, width=8, blocks=1, embed_dim=4),
                   seed=0)
    for p in model.main_graph.params():
        if p.name == "tse.head.W" or p.name == "tse.head.b":
            p.values[...] = 0.0
    prefix = tmp_path / "passthrough"
    save_model(model, str(prefix))
    out = tmp_path / "evalpt"
    rc = main(["eval", "--config", str(cfg_path), "--checkpoint", str(prefix),
               "--corpus", str(corpus_dir), "--out", str(out)])
    assert rc == EXIT_OK
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    col = header.index("sample_sisdri_mean")
    for ln in lines[1:]:
        assert abs(float(ln.split(",")[col])) < 1e-3


def test_exit_codes(workdir, tmp_path):
    _, cfg_path, corpus_dir, train_dir = workdir
    assert main(["eval", "--config", str(cfg_path),
                 "--checkpoint", str(tmp_path / "nope"),
                 "--corpus", str(corpus_dir),
                 "--out", str(tmp_path / "x")]) == EXIT_MISSING_FILE
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("[run]\nmodel = nonsense\n")
    assert main(["gen", "--config", str(bad_cfg),
                 "--out", str(tmp_path / "c")]) == EXIT_BAD_CONFIG
    # Corrupt a corpus file: data error.
    broken = tmp_path / "broken"
    assert main(["gen", "--config", str(cfg_path), "--out", str(broken)]) == EXIT_OK
    victim = broken / "test00000.y.spec"
    victim.write_bytes(victim.read_bytes()[:-4])
    assert main(["train", "--config", str(cfg_path), "--corpus", str(broken),
                 "--out", str(tmp_path / "t")]) == EXIT_DATA_ERROR
    with pytest.raises(SystemExit):
        main(["extract"])  # missing required args


def test_config_parsing_roundtrip():
    cfg = parse_config_text(TINY_CONFIG)
    assert cfg.model_variant == "diff-tse"
    assert cfg.corpus.n_train == 10
    assert cfg.train.steps == 12
    assert cfg.sampler.ensemble == 2
    from difftse.config import render_config
    again = parse_config_text(render_config(cfg))
    assert again == cfg
    with pytest.raises(ConfigError):
        parse_config_text("[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[train]\nnot_a_key = 1\n")


def test_verify_quick():
    assert main(["verify", "--quick"]) == EXIT_OK
