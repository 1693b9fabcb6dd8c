"""Audio I/O, differentiable log-Mel features and waveform augmentation."""

from __future__ import annotations

import functools
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, DomainError, FormatError
from .tensor import Tensor

SeedLike = Union[None, int, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(0 if seed is None else seed)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DomainError(f"waveform must be 1-d, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    sample_rate: int = 22050
    log_floor: float = 1e-10
    norm_eps: float = 1e-5
    # 25 ms at 22.05 kHz is 551 samples, longer than a 512-point FFT; the
    # window is shortened to n_fft unless strict sizing is requested
    clamp_window: bool = True

    def __post_init__(self):
        if min(self.n_mels, self.n_fft, self.sample_rate) <= 0 or self.win_ms <= 0 or self.hop_ms <= 0:
            raise ConfigurationError(f"feature settings must be positive: {self}")
        if self.hop_length < 1:
            raise ConfigurationError("hop shorter than one sample")
        if self.n_fft < self.nominal_win_length and not self.clamp_window:
            raise ConfigurationError(
                f"n_fft={self.n_fft} shorter than the {self.nominal_win_length}-sample window")
        if self.n_mels > self.n_bins:
            raise ConfigurationError(f"n_mels={self.n_mels} exceeds {self.n_bins} FFT bins")

    @property
    def nominal_win_length(self) -> int:
        return int(self.sample_rate * self.win_ms / 1000.0 + 1e-9)

    @property
    def win_length(self) -> int:
        return min(self.nominal_win_length, self.n_fft)

    @property
    def hop_length(self) -> int:
        return int(self.sample_rate * self.hop_ms / 1000.0 + 1e-9)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return (n_samples - self.win_length) // self.hop_length + 1


# ---------------------------------------------------------------------------
# WAV files
# ---------------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path: Union[str, os.PathLike]) -> Waveform:
    """Read a mono WAV file holding 16-bit PCM or 32-bit float samples."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file (bad 'RIFF'/'WAVE' tag)")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: 'fmt ' chunk too short ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            tag = fmt[0]
            if tag == _EXTENSIBLE and size >= 26:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag,) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise FormatError(f"{path}: missing 'data' chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels != 1:
        raise FormatError(f"{path}: field 'channels' = {channels}, only mono is supported")
    if rate <= 0:
        raise FormatError(f"{path}: field 'sample_rate' = {rate}")
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2") / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data[:len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise FormatError(
            f"{path}: field 'format' = (tag {tag}, {bits} bits); "
            "supported: 16-bit PCM or 32-bit float")
    return Waveform(samples.astype(np.float64), rate)


def write_wav(path: Union[str, os.PathLike], wave: Waveform, float32: bool = False) -> None:
    """Write a mono WAV file (16-bit PCM by default)."""
    if float32:
        payload = wave.samples.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        q = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        tag, bits = _PCM, 16
    block = bits // 8
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, tag, 1, wave.sample_rate, wave.sample_rate * block,
                         block, bits, b"data", len(payload))
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# spectral features
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _dft_matrices(win_length: int, n_fft: int) -> Tuple[np.ndarray, np.ndarray]:
    # frames are zero-padded to n_fft, so only the first win_length rows matter
    n = np.arange(win_length)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    ang = 2.0 * np.pi * ((n * k) % n_fft) / n_fft
    return np.cos(ang), -np.sin(ang)


@functools.lru_cache(maxsize=16)
def _window(win_length: int) -> np.ndarray:
    return np.hamming(win_length)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=16)
def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-scale filters spanning 0 Hz to Nyquist, shape ``[n_mels, n_bins]``."""
    return _mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)


def _as_signal(w, cfg: FeatureConfig) -> Tensor:
    if isinstance(w, Waveform):
        if w.sample_rate != cfg.sample_rate:
            raise ConfigurationError(
                f"waveform at {w.sample_rate} Hz but features configured for {cfg.sample_rate} Hz")
        w = w.samples
    w = T.as_tensor(w)
    if w.ndim != 1:
        raise DomainError(f"expected a 1-d signal, got shape {w.shape}")
    if len(w) < cfg.win_length:
        raise DegenerateInputError(
            f"clip of {len(w)} samples is shorter than one {cfg.win_length}-sample window")
    return w


def _frame_index(n_samples: int, cfg: FeatureConfig) -> np.ndarray:
    n = cfg.n_frames(n_samples)
    return cfg.hop_length * np.arange(n)[:, None] + np.arange(cfg.win_length)[None, :]


def power_spectrogram(w, cfg: FeatureConfig) -> Tensor:
    """|STFT|^2 as ``[n_bins, frames]``, built from tape ops."""
    w = _as_signal(w, cfg)
    frames = T.getitem(w, _frame_index(len(w), cfg)) * _window(cfg.win_length)
    cos_m, sin_m = _dft_matrices(cfg.win_length, cfg.n_fft)
    re = T.matmul(frames, cos_m)
    im = T.matmul(frames, sin_m)
    return T.transpose(re * re + im * im, (1, 0))


def stft_magnitude(w, cfg: FeatureConfig) -> Tensor:
    """Magnitude spectrogram ``[n_fft/2 + 1, frames]`` (Hamming window, no centering)."""
    return T.sqrt(power_spectrogram(w, cfg))


def log_mel(w, cfg: FeatureConfig) -> Tensor:
    """Instance-normalised log-Mel spectrogram ``[n_mels, frames]``, differentiable in ``w``."""
    power = power_spectrogram(w, cfg)
    if power.shape[1] < 2:
        raise DegenerateInputError(
            f"clip yields {power.shape[1]} frame(s); at least 2 are needed for normalisation")
    mel = T.matmul(mel_filterbank(cfg), power)
    logmel = T.log(mel + cfg.log_floor)
    out = T.instance_norm(T.reshape(logmel, (1,) + logmel.shape), cfg.norm_eps)
    return T.reshape(out, logmel.shape)


def log_mel_fast(samples, cfg: FeatureConfig) -> np.ndarray:
    """FFT-based twin of :func:`log_mel` for bulk, gradient-free extraction."""
    x = _as_signal(samples, cfg).data
    idx = _frame_index(len(x), cfg)
    if len(idx) < 2:
        raise DegenerateInputError(
            f"clip yields {len(idx)} frame(s); at least 2 are needed for normalisation")
    spec = np.fft.rfft(x[idx] * _window(cfg.win_length), n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    logmel = np.log(mel_filterbank(cfg) @ power.T + cfg.log_floor)
    mu = logmel.mean(axis=1, keepdims=True)
    var = ((logmel - mu) ** 2).mean(axis=1, keepdims=True)
    return (logmel - mu) / np.sqrt(np.maximum(var, cfg.norm_eps))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _samples(w) -> Tuple[np.ndarray, Optional[int]]:
    if isinstance(w, Waveform):
        return w.samples, w.sample_rate
    return np.asarray(w, dtype=np.float64), None


def _wrap(x: np.ndarray, rate: Optional[int]):
    return Waveform(x, rate) if rate is not None else x


def trim_or_pad(w, n_samples: int, seed: SeedLike = None):
    """Random contiguous crop when longer than ``n_samples``, zero suffix when shorter."""
    if n_samples <= 0:
        raise DomainError(f"n_samples must be positive, got {n_samples}")
    x, rate = _samples(w)
    if len(x) > n_samples:
        start = int(_rng(seed).integers(0, len(x) - n_samples + 1))
        x = x[start:start + n_samples]
    elif len(x) < n_samples:
        x = np.concatenate([x, np.zeros(n_samples - len(x))])
    return _wrap(x.copy(), rate)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def scale_to_snr(target, noise, snr_db: float) -> np.ndarray:
    """Rescale ``noise`` (same length as ``target``) so that the pair has the requested SNR."""
    t, _ = _samples(target)
    n, _ = _samples(noise)
    if np.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(n)
    noise_rms = rms(n)
    if noise_rms == 0.0:
        raise DegenerateInputError("noise is silent; SNR scaling is undefined")
    return n * (rms(t) / (noise_rms * 10.0 ** (snr_db / 20.0)))


def mix_additive(target, noise, snr_db: float, seed: SeedLike = None):
    """Add ``noise`` to ``target`` at ``snr_db`` and clip the result to [-1, 1]."""
    t, rate = _samples(target)
    n, _ = _samples(noise)
    if np.isinf(snr_db) and snr_db > 0:
        return _wrap(t.copy(), rate)
    if rms(n) == 0.0:
        raise DegenerateInputError("noise is silent; SNR scaling is undefined")
    fitted = trim_or_pad(n, len(t), seed)
    out = t + scale_to_snr(t, fitted, snr_db)
    return _wrap(np.clip(out, -1.0, 1.0), rate)


def convolve_reverb(target, rir):
    """Convolve with a room impulse response, keep the target length and peak level."""
    t, rate = _samples(target)
    h, _ = _samples(rir)
    if len(h) == 0:
        raise DegenerateInputError("room impulse response is empty")
    out = signal.convolve(t, h, mode="full")[:len(t)]
    peak_in = np.abs(t).max(initial=0.0)
    peak_out = np.abs(out).max(initial=0.0)
    if peak_out > 0.0:
        out = out * (peak_in / peak_out)
    return _wrap(out, rate)


AUDIO_SUFFIXES = (".wav", ".flac")


def read_audio(path: Union[str, os.PathLike]) -> Waveform:
    """WAV through the built-in reader; FLAC through the optional ``soundfile`` package."""
    path = Path(path)
    if path.suffix.lower() != ".flac":
        return read_wav(path)
    try:
        import soundfile
    except ImportError:
        raise ConfigurationError(f"{path}: reading FLAC needs the 'soundfile' package "
                                 "(pip install 'asdspoof[flac]')") from None
    data, rate = soundfile.read(str(path), dtype="float64", always_2d=True)
    if data.shape[1] != 1:
        raise FormatError(f"{path}: field 'channels' = {data.shape[1]}, only mono is supported")
    return Waveform(data[:, 0], int(rate))


def resample(x: np.ndarray, from_rate: int, to_rate: int) -> np.ndarray:
    """Polyphase resampling; the identity when the rates agree."""
    x = np.asarray(x, dtype=np.float64)
    if from_rate == to_rate:
        return x
    g = math.gcd(int(from_rate), int(to_rate))
    return signal.resample_poly(x, int(to_rate) // g, int(from_rate) // g)


def load_audio(path: Union[str, os.PathLike], sample_rate: Optional[int] = None) -> Waveform:
    w = read_audio(path)
    if sample_rate is None or w.sample_rate == sample_rate:
        return w
    return Waveform(resample(w.samples, w.sample_rate, sample_rate), sample_rate)


def _load_bank(root: Optional[Union[str, os.PathLike]], sample_rate: Optional[int] = None):
    """Group the audio files under ``root`` by their first-level subdirectory (category)."""
    bank = {}
    if not root:
        return bank
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"augmentation directory {root} does not exist")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES)
    for p in files:
        rel = p.relative_to(root)
        category = rel.parts[0] if len(rel.parts) > 1 else "default"
        bank.setdefault(category, []).append(load_audio(p, sample_rate).samples)
    return bank


class WaveformAugmenter:
    """On-the-fly additive-noise and reverberation augmentation.

    Noise is drawn by first picking a category (first-level subdirectory,
    e.g. ``music``/``speech``/``noise`` in a MUSAN-style tree) uniformly and
    then a file uniformly within it.
    """

    def __init__(self, noises: Optional[dict] = None, rirs: Optional[Sequence[np.ndarray]] = None,
                 p_noise: float = 0.5, p_reverb: float = 0.5,
                 snr_range: Tuple[float, float] = (5.0, 20.0)):
        self.noises = {k: v for k, v in (noises or {}).items() if v}
        self.rirs = list(rirs or [])
        self.p_noise = p_noise
        self.p_reverb = p_reverb
        self.snr_range = snr_range

    @classmethod
    def from_dirs(cls, noise_dir=None, rir_dir=None, sample_rate: Optional[int] = None,
                  **kwargs) -> "WaveformAugmenter":
        """Load banks from directories, resampling to ``sample_rate`` when given."""
        rirs = [r for group in _load_bank(rir_dir, sample_rate).values() for r in group]
        return cls(_load_bank(noise_dir, sample_rate), rirs, **kwargs)

    @property
    def active(self) -> bool:
        return bool(self.noises) or bool(self.rirs)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.noises and rng.random() < self.p_noise:
            cats = sorted(self.noises)
            bank = self.noises[cats[int(rng.integers(len(cats)))]]
            noise = bank[int(rng.integers(len(bank)))]
            snr = float(rng.uniform(*self.snr_range))
            if rms(noise) > 0.0:
                x = mix_additive(x, noise, snr, seed=rng)
        if self.rirs and rng.random() < self.p_reverb:
            x = convolve_reverb(x, self.rirs[int(rng.integers(len(self.rirs)))])
        return x


def load_waveforms(paths: Sequence[Union[str, os.PathLike]]) -> List[Waveform]:
    return [read_wav(p) for p in paths]
