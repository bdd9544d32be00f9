"""Waveform <-> spectrogram conversion and evaluation metrics.

The STFT pads the signal by half a window on both sides, applies a periodic
window per frame, and scales by 2/sum(window) so a full-scale bin-centered
sinusoid reads magnitude ~1.  Inversion is weighted overlap-add divided by
the per-sample squared-window coverage, which reconstructs exactly wherever
coverage is positive.  An optional amplitude compression
x~ = b * |X|**a * exp(i*angle(X)) is applied after the linear transform;
a = b = 1 is the identity and is skipped bit-exactly.
"""

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .backends import overlap_add
from .errors import ContractError, DomainError

DB_CAP = 50.0


class Waveform(NamedTuple):
    samples: np.ndarray
    sample_rate: int


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 64
    hop_length: int = 16
    window: str = "hann"
    amp_exponent: float = 0.5
    amp_scale: float = 0.33
    sample_rate: int = 8000

    def __post_init__(self):
        if self.win_length < 2:
            raise DomainError(f"win_length must be >= 2, got {self.win_length}")
        if not (0 < self.hop_length <= self.win_length):
            raise DomainError("need 0 < hop_length <= win_length")
        if self.amp_exponent <= 0 or self.amp_scale <= 0:
            raise DomainError("amplitude transform constants must be > 0")
        w = self.window_values()
        # Every sample position inside one hop period must receive squared-
        # window coverage, otherwise overlap-add cannot reconstruct.
        cover = np.zeros(self.hop_length)
        for m in range(self.hop_length):
            cover[m] = np.sum(w[m::self.hop_length] ** 2)
        if cover.min() <= 1e-12 * max(cover.max(), 1e-300):
            raise DomainError(
                f"window {self.window!r} with hop {self.hop_length} cannot "
                "reconstruct (zero squared-window coverage)"
            )

    def window_values(self) -> np.ndarray:
        n = np.arange(self.win_length)
        if self.window == "hann":
            return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.win_length)
        if self.window == "rect":
            return np.ones(self.win_length)
        raise DomainError(f"unknown window {self.window!r}")

    @property
    def n_freqs(self) -> int:
        return self.win_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length


def amp_transform(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if cfg.amp_exponent == 1.0 and cfg.amp_scale == 1.0:
        return spec
    mag = np.abs(spec)
    phase = np.where(mag > 0, spec / np.where(mag > 0, mag, 1.0), 0.0)
    return cfg.amp_scale * mag ** cfg.amp_exponent * phase


def amp_inverse(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if cfg.amp_exponent == 1.0 and cfg.amp_scale == 1.0:
        return spec
    mag = np.abs(spec)
    phase = np.where(mag > 0, spec / np.where(mag > 0, mag, 1.0), 0.0)
    return (mag / cfg.amp_scale) ** (1.0 / cfg.amp_exponent) * phase


def stft(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex (F, L) spectrogram of a 1-D signal."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("stft expects a nonempty 1-D signal")
    W, H = cfg.win_length, cfg.hop_length
    pad = W // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(W)])
    L = cfg.n_frames(x.size)
    idx = np.arange(W)[None, :] + H * np.arange(L)[:, None]
    frames = xp[idx] * cfg.window_values()[None, :]
    spec = np.fft.rfft(frames, axis=1) * (2.0 / cfg.window_values().sum())
    return amp_transform(spec.T.copy(), cfg)


def istft(spec: np.ndarray, cfg: StftConfig, n_samples: int | None = None) -> np.ndarray:
    """Inverse of stft; pass n_samples to recover the exact input length."""
    s = np.asarray(spec, dtype=np.complex128)
    if s.ndim != 2 or s.shape[0] != cfg.n_freqs:
        raise ContractError(
            f"expected ({cfg.n_freqs}, L) spectrogram, got {s.shape}"
        )
    W, H = cfg.win_length, cfg.hop_length
    L = s.shape[1]
    if n_samples is None:
        n_samples = (L - 1) * H
    win = cfg.window_values()
    lin = amp_inverse(s, cfg) * (win.sum() / 2.0)
    frames = np.fft.irfft(lin.T, n=W, axis=1)
    total = (L - 1) * H + W
    num = overlap_add(np.ascontiguousarray(frames * win[None, :]), H, total)
    den = overlap_add(np.broadcast_to(win ** 2, (L, W)).copy(), H, total)
    out = num / np.maximum(den, 1e-12)
    pad = W // 2
    if pad + n_samples > total:
        raise ContractError(
            f"cannot reconstruct {n_samples} samples from {L} frames"
        )
    return out[pad:pad + n_samples]


def _power(x: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(x)) ** 2))


def _ratio_db(num: float, den: float, cap: float = DB_CAP) -> float:
    if den <= 0.0:
        return cap
    if num <= 0.0:
        return -cap
    return float(np.clip(10.0 * np.log10(num / den), -cap, cap))


def snr_db(reference, estimate, cap: float = DB_CAP) -> float:
    """Plain SNR in dB between reference and estimate, clamped to +-cap.

    Works on real or complex arrays (power is the squared modulus sum).
    """
    ref = np.asarray(reference)
    est = np.asarray(estimate)
    if ref.shape != est.shape:
        raise ContractError(f"shape mismatch: {ref.shape} vs {est.shape}")
    p_ref = _power(ref)
    if p_ref == 0.0:
        raise ContractError("zero reference signal")
    return _ratio_db(p_ref, _power(ref - est), cap)


def si_sdr(reference, estimate, cap: float = DB_CAP) -> float:
    """Scale-invariant SDR in dB, clamped to +-cap.

    The estimate is first projected onto the reference with the optimal
    scale alpha = <est, ref> / ||ref||^2, so si_sdr(x, c*e) == si_sdr(x, e)
    for any c > 0.
    """
    ref = np.asarray(reference, dtype=np.float64).ravel()
    est = np.asarray(estimate, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise ContractError(f"length mismatch: {ref.size} vs {est.size}")
    p_ref = float(ref @ ref)
    if p_ref == 0.0:
        raise ContractError("zero reference signal")
    alpha = float(est @ ref) / p_ref
    proj = alpha * ref
    resid = est - proj
    return _ratio_db(float(proj @ proj), float(resid @ resid), cap)


def si_sdr_improvement(reference, mixture, estimate, cap: float = DB_CAP) -> float:
    """si_sdr(ref, estimate) - si_sdr(ref, mixture)."""
    return si_sdr(reference, estimate, cap) - si_sdr(reference, mixture, cap)


# --- RIFF WAV I/O: mono, 32-bit float little-endian, bit-exact round trip ---

_WAVE_FORMAT_IEEE_FLOAT = 3


def write_wav(path, samples, sample_rate: int):
    data = np.asarray(samples, dtype="<f4").tobytes()
    n = len(data) // 4
    fmt = struct.pack(
        "<HHIIHH", _WAVE_FORMAT_IEEE_FLOAT, 1, sample_rate,
        sample_rate * 4, 4, 32,
    )
    fact = struct.pack("<I", n)
    body = (
        b"WAVE"
        + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        + b"fact" + struct.pack("<I", len(fact)) + fact
        + b"data" + struct.pack("<I", len(data)) + data
    )
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path) -> Waveform:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ContractError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        chunk = raw[pos + 8:pos + 8 + size]
        if len(chunk) < size:
            raise ContractError(f"{path}: truncated chunk {cid!r}")
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", chunk[:16])
        elif cid == b"data":
            data = chunk
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ContractError(f"{path}: missing fmt/data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != _WAVE_FORMAT_IEEE_FLOAT or channels != 1 or bits != 32:
        raise ContractError(
            f"{path}: expected mono 32-bit float WAV, got tag={tag} "
            f"channels={channels} bits={bits}"
        )
    return Waveform(np.frombuffer(data, dtype="<f4").copy(), rate)
