"""Synthetic two-speaker corpus.

Speakers are harmonic voices: a fundamental plus up to four overtones with
a fixed amplitude profile.  Utterances jitter the per-harmonic amplitudes,
phases, and onset, so enrollment and mixture utterances of one speaker
share only the comb structure.  Fundamentals of distinct speakers differ
by at least 20%, which keeps the combs separable and the task solvable by
a frequency mask (the oracle extractor below).

Mixtures are built in the linear spectral domain (identity amplitude
transform): the stored mixture spectrogram is exactly the sum of the two
source spectrograms, and the mixture waveform is the float32 sum of the
source waveforms.

On disk a corpus is a directory with one manifest line per example, four
WAV files and four binary spectrogram dumps per example, all crc32
checksummed.  Round trips are bit-exact.
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, CorpusError, DomainError
from .metrics import StftConfig, read_wav, stft, write_wav


def linear_stft_config(sample_rate: int = 8000) -> StftConfig:
    """STFT settings for corpus tensors: identity amplitude transform."""
    return StftConfig(win_length=64, hop_length=16, window="hann",
                      amp_exponent=1.0, amp_scale=1.0,
                      sample_rate=sample_rate)


@dataclass(frozen=True)
class ToySpeaker:
    id: int
    f0: float
    amps: tuple
    amp_jitter: float = 0.2
    onset_jitter_s: float = 0.01

    def __post_init__(self):
        if any(a < 0 for a in self.amps):
            raise DomainError("harmonic amplitudes must be nonnegative")


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 8
    n_train: int = 2000
    n_test: int = 200
    duration_s: float = 0.125
    sample_rate: int = 8000
    f_min: float = 300.0
    f_max: float = 3800.0
    min_f0_ratio: float = 1.2
    min_bin_gap: int = 3
    max_harmonics: int = 5
    overtone_rel_amp: float = 0.08
    tir_db: float = 0.0
    rms_level: float = 0.15
    seed: int = 0


@dataclass
class MixtureExample:
    x0: np.ndarray
    y: np.ndarray
    c: np.ndarray
    x0_interferer: np.ndarray
    target_id: int
    interferer_id: int
    x0_wav: np.ndarray
    y_wav: np.ndarray
    c_wav: np.ndarray
    xi_wav: np.ndarray
    index: int = -1
    split: str = ""


@dataclass
class Corpus:
    config: CorpusConfig
    speakers: list
    train: list
    test: list


def _bin_hz(cfg: CorpusConfig) -> float:
    return cfg.sample_rate / linear_stft_config(cfg.sample_rate).win_length


def _bin_range(cfg: CorpusConfig):
    bw = _bin_hz(cfg)
    n_freqs = linear_stft_config(cfg.sample_rate).n_freqs
    lo = max(2, int(np.ceil(cfg.f_min / bw)))
    hi = min(n_freqs - 2, int(np.floor(cfg.f_max / bw)))
    return lo, hi


def _make_speaker(speaker_id: int, f0_bin: int, cfg: CorpusConfig,
                  rng: np.random.Generator) -> ToySpeaker:
    """Speaker = one strong line at a bin-centered fundamental plus a few
    faint overtones (>= 22 dB down).

    At the 64-sample analysis window, 8 separable combs do not fit in 31
    bins, so separability rides on the fundamentals alone; the overtones
    add timbre without moving energy off the comb's strong support.
    """
    bw = _bin_hz(cfg)
    f0 = f0_bin * bw
    nyq_bin = linear_stft_config(cfg.sample_rate).n_freqs - 2
    amps = [1.0]
    for k in range(2, cfg.max_harmonics + 1):
        if k * f0_bin > nyq_bin:
            break
        amps.append(cfg.overtone_rel_amp * (0.4 + 0.6 * rng.random()))
    amps = np.asarray(amps)
    amps /= np.sqrt(np.sum(amps ** 2))
    return ToySpeaker(id=speaker_id, f0=f0, amps=tuple(float(a) for a in amps))


def _min_span(b: int, count: int, cfg: CorpusConfig) -> int:
    """Smallest top bin reachable placing `count` more rungs above b."""
    for _ in range(count):
        b = max(b + cfg.min_bin_gap, int(np.ceil(b * cfg.min_f0_ratio)))
    return b


def gen_speaker(seed, cfg: CorpusConfig = CorpusConfig(), existing=(),
                speaker_id: int = 0, max_tries: int = 1000) -> ToySpeaker:
    """Deterministic single-speaker draw respecting both separation
    invariants (frequency ratio and bin gap) against `existing`."""
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = _bin_range(cfg)
    bw = _bin_hz(cfg)
    taken = [int(round(s.f0 / bw)) for s in existing]
    for _ in range(max_tries):
        b = int(rng.integers(lo, hi + 1))
        f0 = b * bw
        if all(
            abs(b - tb) >= cfg.min_bin_gap
            and max(f0, s.f0) / min(f0, s.f0) >= cfg.min_f0_ratio
            for tb, s in zip(taken, existing)
        ):
            return _make_speaker(speaker_id, b, cfg, rng)
    raise CorpusError(
        f"could not place speaker {speaker_id} after {max_tries} tries"
    )


def gen_speakers(cfg: CorpusConfig, seed_seq=None):
    """Build the whole population as a randomized ladder of analysis-bin
    fundamentals; gaps and ratios hold by construction."""
    seed_seq = seed_seq or np.random.SeedSequence([cfg.seed, 0x5eed])
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    lo, hi = _bin_range(cfg)
    n = cfg.n_speakers
    if _min_span(lo, n - 1, cfg) > hi:
        raise CorpusError(
            f"cannot fit {n} speakers with gap >= {cfg.min_bin_gap} bins and "
            f"ratio >= {cfg.min_f0_ratio} inside [{cfg.f_min}, {cfg.f_max}] Hz"
        )
    speakers = []
    b = lo
    for i in range(n):
        floor_b = b if i == 0 else max(
            b + cfg.min_bin_gap, int(np.ceil(b * cfg.min_f0_ratio))
        )
        # Highest rung that still leaves room for the remaining ones.
        ceil_b = floor_b
        while ceil_b < hi and _min_span(ceil_b + 1, n - 1 - i, cfg) <= hi:
            ceil_b += 1
        b = int(rng.integers(floor_b, ceil_b + 1))
        speakers.append(_make_speaker(i, b, cfg, rng))
    return speakers


def synth_utterance(speaker: ToySpeaker, cfg: CorpusConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """One jittered harmonic utterance, RMS-normalized, as float32."""
    n = int(round(cfg.duration_s * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    sig = np.zeros(n)
    for k, a in enumerate(speaker.amps, start=1):
        jit = 1.0 + speaker.amp_jitter * (2.0 * rng.random() - 1.0)
        phase = 2.0 * np.pi * rng.random()
        sig += a * jit * np.sin(2.0 * np.pi * speaker.f0 * k * t + phase)
    onset = int(rng.random() * speaker.onset_jitter_s * cfg.sample_rate)
    if onset > 0:
        ramp = min(onset, int(0.004 * cfg.sample_rate))
        env = np.ones(n)
        env[:onset - ramp] = 0.0
        if ramp > 0:
            env[onset - ramp:onset] = 0.5 - 0.5 * np.cos(
                np.pi * np.arange(ramp) / ramp
            )
        sig *= env
    rms = float(np.sqrt(np.mean(sig ** 2)))
    if rms > 0:
        sig *= cfg.rms_level / rms
    return sig.astype(np.float32)


def gen_example(target: ToySpeaker, interferer: ToySpeaker,
                cfg: CorpusConfig, rng: np.random.Generator,
                stft_cfg: StftConfig | None = None,
                silent_interferer: bool = False) -> MixtureExample:
    """Build an (x0, y, c) triple with exact spectral additivity."""
    if target.id == interferer.id:
        raise ContractError("target and interferer must be distinct speakers")
    stft_cfg = stft_cfg or linear_stft_config(cfg.sample_rate)
    x0_wav = synth_utterance(target, cfg, rng)
    if silent_interferer:
        xi_wav = np.zeros_like(x0_wav)
    else:
        xi_wav = synth_utterance(interferer, cfg, rng)
        gain = np.float32(10.0 ** (-cfg.tir_db / 20.0))
        xi_wav = (xi_wav * gain).astype(np.float32)
    c_wav = synth_utterance(target, cfg, rng)

    # float32 sum: the stored mixture equals the stored sources summed.
    y_wav = (x0_wav.astype(np.float64) + xi_wav.astype(np.float64)).astype(np.float32)

    x0_spec = stft(x0_wav.astype(np.float64), stft_cfg)
    xi_spec = stft(xi_wav.astype(np.float64), stft_cfg)
    y_spec = x0_spec + xi_spec
    c_spec = stft(c_wav.astype(np.float64), stft_cfg)
    return MixtureExample(
        x0=x0_spec, y=y_spec, c=c_spec, x0_interferer=xi_spec,
        target_id=target.id, interferer_id=interferer.id,
        x0_wav=x0_wav, y_wav=y_wav, c_wav=c_wav, xi_wav=xi_wav,
    )


def _example_rng(master_seed: int, split: str, index: int):
    tag = {"train": 1, "test": 2, "swap": 3}[split]
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([master_seed, tag, index]))
    )


def swap_enrollment(corpus: "Corpus", ex: MixtureExample) -> np.ndarray:
    """A fresh enrollment of the example's interferer (for clue-swap runs)."""
    spk = corpus.speakers[ex.interferer_id]
    rng = _example_rng(corpus.config.seed, "swap", ex.index)
    wav = synth_utterance(spk, corpus.config, rng)
    return stft(wav.astype(np.float64), linear_stft_config(corpus.config.sample_rate))


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    """Pure function of (seed, config)."""
    speakers = gen_speakers(cfg)
    n_spk = len(speakers)
    out = {"train": [], "test": []}
    for split, count in (("train", cfg.n_train), ("test", cfg.n_test)):
        for i in range(count):
            rng = _example_rng(cfg.seed, split, i)
            t_idx = int(rng.integers(n_spk))
            i_idx = int(rng.integers(n_spk - 1))
            if i_idx >= t_idx:
                i_idx += 1
            ex = gen_example(speakers[t_idx], speakers[i_idx], cfg, rng)
            ex.index = i
            ex.split = split
            out[split].append(ex)
    return Corpus(config=cfg, speakers=speakers, train=out["train"],
                  test=out["test"])


def harmonic_bins(speaker: ToySpeaker, stft_cfg: StftConfig, width: int = 1,
                  min_rel_amp: float = 0.2):
    """Frequency bins within `width` of the speaker's meaningful harmonics
    (those within min_rel_amp of the strongest line)."""
    bin_hz = stft_cfg.sample_rate / stft_cfg.win_length
    amax = max(speaker.amps)
    bins = set()
    for k, a in enumerate(speaker.amps, start=1):
        if a < min_rel_amp * amax:
            continue
        b = int(round(speaker.f0 * k / bin_hz))
        for d in range(-width, width + 1):
            if 0 <= b + d < stft_cfg.n_freqs:
                bins.add(b + d)
    return sorted(bins)


def oracle_mask_extract(y_spec: np.ndarray, speaker: ToySpeaker,
                        stft_cfg: StftConfig, width: int = 1,
                        min_rel_amp: float = 0.2) -> np.ndarray:
    """Keep only the bins on the target's meaningful harmonic support.

    Knows the speaker's comb exactly; used to establish the corpus is
    solvable before any training."""
    mask = np.zeros(y_spec.shape[0], dtype=bool)
    mask[harmonic_bins(speaker, stft_cfg, width, min_rel_amp)] = True
    return y_spec * mask[:, None]


# ---------------------------------------------------------------- storage

_SPEC_MAGIC = b"DTSP"


def write_spec(path, arr: np.ndarray):
    a = np.ascontiguousarray(arr, dtype="<c16")
    if a.ndim != 2:
        raise ContractError("spec dumps are 2-D")
    with open(path, "wb") as f:
        f.write(_SPEC_MAGIC)
        f.write(struct.pack("<ii", a.shape[0], a.shape[1]))
        f.write(a.tobytes())


def read_spec(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != _SPEC_MAGIC:
        raise CorpusError(f"{path}: not a spectrogram dump")
    F, L = struct.unpack("<ii", raw[4:12])
    payload = raw[12:]
    if len(payload) != F * L * 16:
        raise CorpusError(
            f"{path}: truncated payload ({len(payload)} bytes for {F}x{L})"
        )
    return np.frombuffer(payload, dtype="<c16").reshape(F, L).astype(np.complex128)


def _crc(path) -> str:
    with open(path, "rb") as f:
        return format(zlib.crc32(f.read()) & 0xFFFFFFFF, "08x")


def write_corpus(corpus: Corpus, path):
    os.makedirs(path, exist_ok=True)
    cfg = corpus.config
    lines = ["[meta]"]
    for k, v in vars(cfg).items():
        lines.append(f"{k} = {v}")
    lines.append("[speakers]")
    for s in corpus.speakers:
        amps = ",".join(f"{a!r}" for a in s.amps)
        lines.append(
            f"{s.id} f0={s.f0!r} amps={amps} amp_jitter={s.amp_jitter!r} "
            f"onset_jitter_s={s.onset_jitter_s!r}"
        )
    lines.append("[examples]")
    for split in ("train", "test"):
        for ex in getattr(corpus, split):
            stem = f"{split}{ex.index:05d}"
            rate = cfg.sample_rate
            write_wav(os.path.join(path, f"{stem}.x0.wav"), ex.x0_wav, rate)
            write_wav(os.path.join(path, f"{stem}.y.wav"), ex.y_wav, rate)
            write_wav(os.path.join(path, f"{stem}.c.wav"), ex.c_wav, rate)
            write_wav(os.path.join(path, f"{stem}.xi.wav"), ex.xi_wav, rate)
            write_spec(os.path.join(path, f"{stem}.x0.spec"), ex.x0)
            write_spec(os.path.join(path, f"{stem}.y.spec"), ex.y)
            write_spec(os.path.join(path, f"{stem}.c.spec"), ex.c)
            write_spec(os.path.join(path, f"{stem}.xi.spec"), ex.x0_interferer)
            crcs = ",".join(
                _crc(os.path.join(path, f"{stem}.{suffix}"))
                for suffix in ("x0.wav", "y.wav", "c.wav", "xi.wav",
                               "x0.spec", "y.spec", "c.spec", "xi.spec")
            )
            lines.append(
                f"{stem} split={split} index={ex.index} "
                f"target={ex.target_id} interferer={ex.interferer_id} crcs={crcs}"
            )
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_meta(lines) -> CorpusConfig:
    kv = {}
    for line in lines:
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    try:
        return CorpusConfig(
            n_speakers=int(kv["n_speakers"]), n_train=int(kv["n_train"]),
            n_test=int(kv["n_test"]), duration_s=float(kv["duration_s"]),
            sample_rate=int(kv["sample_rate"]), f_min=float(kv["f_min"]),
            f_max=float(kv["f_max"]), min_f0_ratio=float(kv["min_f0_ratio"]),
            max_harmonics=int(kv["max_harmonics"]), tir_db=float(kv["tir_db"]),
            rms_level=float(kv["rms_level"]), seed=int(kv["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"malformed manifest meta: {exc}") from exc


def read_corpus(path) -> Corpus:
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest):
        raise CorpusError(f"{path}: no manifest.txt")
    with open(manifest) as f:
        lines = [ln.rstrip("\n") for ln in f]
    sections = {"[meta]": [], "[speakers]": [], "[examples]": []}
    current = None
    for ln in lines:
        if ln in sections:
            current = ln
        elif ln.strip():
            if current is None:
                raise CorpusError(f"{path}: manifest line outside any section")
            sections[current].append(ln)
    cfg = _parse_meta(sections["[meta]"])

    speakers = []
    for ln in sections["[speakers]"]:
        try:
            sid_s, rest = ln.split(" ", 1)
            kv = dict(tok.split("=", 1) for tok in rest.split(" "))
            amps = tuple(float(a) for a in kv["amps"].split(","))
            speakers.append(ToySpeaker(
                id=int(sid_s), f0=float(kv["f0"]), amps=amps,
                amp_jitter=float(kv["amp_jitter"]),
                onset_jitter_s=float(kv["onset_jitter_s"]),
            ))
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"malformed speaker line {ln!r}") from exc
    if len(speakers) != cfg.n_speakers:
        raise CorpusError(
            f"manifest lists {len(speakers)} speakers, config says "
            f"{cfg.n_speakers}"
        )

    train, test = [], []
    for ln in sections["[examples]"]:
        try:
            stem, rest = ln.split(" ", 1)
            kv = dict(tok.split("=", 1) for tok in rest.split(" "))
            split = kv["split"]
            crcs = kv["crcs"].split(",")
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"malformed example line {ln!r}") from exc
        suffixes = ("x0.wav", "y.wav", "c.wav", "xi.wav",
                    "x0.spec", "y.spec", "c.spec", "xi.spec")
        if len(crcs) != len(suffixes):
            raise CorpusError(f"{stem}: expected {len(suffixes)} checksums")
        for suffix, want in zip(suffixes, crcs):
            fpath = os.path.join(path, f"{stem}.{suffix}")
            if not os.path.exists(fpath):
                raise CorpusError(f"missing corpus file {fpath}")
            got = _crc(fpath)
            if got != want:
                raise CorpusError(
                    f"checksum mismatch for {fpath}: {got} != {want}"
                )
        wavs = [read_wav(os.path.join(path, f"{stem}.{s}")).samples
                for s in suffixes[:4]]
        specs = [read_spec(os.path.join(path, f"{stem}.{s}"))
                 for s in suffixes[4:]]
        ex = MixtureExample(
            x0=specs[0], y=specs[1], c=specs[2], x0_interferer=specs[3],
            target_id=int(kv["target"]), interferer_id=int(kv["interferer"]),
            x0_wav=wavs[0], y_wav=wavs[1], c_wav=wavs[2], xi_wav=wavs[3],
            index=int(kv["index"]), split=split,
        )
        (train if split == "train" else test).append(ex)
    if len(train) != cfg.n_train or len(test) != cfg.n_test:
        raise CorpusError(
            f"example counts {len(train)}/{len(test)} disagree with config "
            f"{cfg.n_train}/{cfg.n_test}"
        )
    return Corpus(config=cfg, speakers=speakers, train=train, test=test)
