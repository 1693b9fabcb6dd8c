import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asdspoof import tensor as T
from asdspoof.errors import ConfigurationError, DegenerateInputError, FormatError
from asdspoof.frontend import (FeatureConfig, Waveform, WaveformAugmenter, convolve_reverb,
                               hz_to_mel, log_mel, log_mel_fast, mel_filterbank, mel_to_hz,
                               mix_additive, power_spectrogram, read_wav, rms, stft_magnitude,
                               trim_or_pad, write_wav)
from asdspoof.gradcheck import grad_check

RNG = np.random.default_rng(7)
SMALL = FeatureConfig(sample_rate=8000, n_fft=256)


def _wav_bytes(payload, tag=1, channels=1, rate=8000, bits=16):
    block = channels * bits // 8
    return struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                       tag, channels, rate, rate * block, block, bits, b"data",
                       len(payload)) + payload


# --- configuration --------------------------------------------------------

def test_paper_defaults():
    cfg = FeatureConfig()
    assert (cfg.n_mels, cfg.win_ms, cfg.hop_ms, cfg.n_fft, cfg.sample_rate) == (40, 25, 10, 512, 22050)
    assert cfg.nominal_win_length == 551 and cfg.win_length == 512
    with pytest.raises(ConfigurationError):
        FeatureConfig(clamp_window=False)
    with pytest.raises(ConfigurationError):
        FeatureConfig(n_mels=300, n_fft=256, sample_rate=8000)


def test_frame_count_formula():
    cfg = FeatureConfig()
    # 1 s at 22050 Hz: floor((22050 - 512) / 220) + 1
    assert log_mel_fast(RNG.normal(size=22050) * 0.1, cfg).shape == (40, 98)
    assert cfg.n_frames(22050) == (22050 - 512) // 220 + 1
    assert SMALL.n_frames(8000) == (8000 - 200) // 80 + 1


# --- WAV I/O --------------------------------------------------------------

def test_read_silence(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(_wav_bytes(b"\x00\x00" * 22050, rate=22050))
    w = read_wav(p)
    assert w.sample_rate == 22050 and len(w.samples) == 22050 and not w.samples.any()


def test_square_wave_bit_level(tmp_path):
    codes = np.tile([32767, -32767], 50).astype("<i2")
    p = tmp_path / "sq.wav"
    p.write_bytes(_wav_bytes(codes.tobytes()))
    w = read_wav(p)
    np.testing.assert_array_equal(w.samples, np.tile([32767 / 32768, -32767 / 32768], 50))


def test_float32_and_roundtrip(tmp_path):
    x = RNG.uniform(-1, 1, 300)
    write_wav(tmp_path / "f.wav", Waveform(x, 8000), float32=True)
    np.testing.assert_array_equal(read_wav(tmp_path / "f.wav").samples, x.astype(np.float32))
    write_wav(tmp_path / "i.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "i.wav").samples
    assert np.abs(back - x).max() <= 0.5 / 32768 + 1e-12


@pytest.mark.parametrize("kwargs,field", [
    (dict(channels=2), "channels"),
    (dict(bits=24), "format"),
    (dict(tag=3, bits=16), "format"),
])
def test_format_errors_name_field(tmp_path, kwargs, field):
    p = tmp_path / "bad.wav"
    p.write_bytes(_wav_bytes(b"\x00" * 12, **kwargs))
    with pytest.raises(FormatError, match=field):
        read_wav(p)


def test_not_riff(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"junk" * 10)
    with pytest.raises(FormatError):
        read_wav(p)


# --- spectral path --------------------------------------------------------

def test_bin_centre_sine_concentrates_energy():
    cfg = FeatureConfig(sample_rate=8000, n_fft=256, win_ms=32)   # window == n_fft
    k = 20
    t = np.arange(2000)
    x = np.sin(2 * np.pi * k * t / cfg.n_fft)
    P = power_spectrogram(x, cfg).data
    share = P[k - 1:k + 2].sum(axis=0) / P.sum(axis=0)
    # a Hamming main lobe spans the neighbouring bins
    assert share.min() > 0.9
    assert np.all(P.argmax(axis=0) == k)


def test_zero_input_gives_zero_spectrum():
    assert not stft_magnitude(np.zeros(1000), SMALL).data.any()


def test_parseval_per_frame():
    x = RNG.normal(size=1200)
    cfg = SMALL
    P = power_spectrogram(x, cfg).data            # one-sided, [bins, frames]
    full = P[0] + P[-1] + 2 * P[1:-1].sum(axis=0)
    idx = cfg.hop_length * np.arange(P.shape[1])[:, None] + np.arange(cfg.win_length)
    frames = x[idx] * np.hamming(cfg.win_length)
    np.testing.assert_allclose(full, cfg.n_fft * (frames ** 2).sum(axis=1), rtol=1e-6)


def test_dft_matrix_path_matches_numpy_fft():
    x = RNG.normal(size=1500)
    cfg = SMALL
    idx = cfg.hop_length * np.arange(cfg.n_frames(1500))[:, None] + np.arange(cfg.win_length)
    ref = np.abs(np.fft.rfft(x[idx] * np.hamming(cfg.win_length), n=cfg.n_fft, axis=1)).T
    np.testing.assert_allclose(stft_magnitude(x, cfg).data, ref, atol=1e-9)


def test_short_clip_error():
    with pytest.raises(DegenerateInputError):
        stft_magnitude(np.zeros(SMALL.win_length - 1), SMALL)


def test_filterbank_construction():
    fb = mel_filterbank(FeatureConfig())
    assert fb.shape == (40, 257)
    assert np.all(fb.sum(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        assert np.all(np.diff(nz) == 1)                    # contiguous support
        peak = np.argmax(row[nz])
        assert np.all(np.diff(row[nz][:peak + 1]) >= 0)
        assert np.all(np.diff(row[nz][peak:]) <= 0)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel([0, 700, 4000])), [0, 700, 4000])
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))


def test_log_mel_white_noise_rows_centred():
    out = log_mel(RNG.normal(size=8000) * 0.3, SMALL).data
    assert out.shape == (40, 98)
    assert np.abs(out.mean(axis=1)).max() < 1e-10


def test_fast_path_agrees():
    x = RNG.normal(size=4000) * 0.2
    np.testing.assert_allclose(log_mel(x, SMALL).data, log_mel_fast(x, SMALL), atol=1e-8)


def test_log_mel_deterministic():
    x = RNG.normal(size=3000)
    assert np.array_equal(log_mel(x, SMALL).data, log_mel(x, SMALL).data)


def test_log_mel_gradient_wrt_waveform():
    cfg = FeatureConfig(sample_rate=8000, n_fft=128, win_ms=16, hop_ms=8, n_mels=20)
    x = RNG.normal(size=600) * 0.3
    w = RNG.normal(size=(20, cfg.n_frames(600)))
    rep = grad_check(lambda t: (log_mel(t, cfg) * w).sum(), x, tol=1e-3, n_coords=30)
    assert rep.passed, rep.max_rel_error


def test_sample_rate_mismatch():
    with pytest.raises(ConfigurationError):
        log_mel(Waveform(np.zeros(8000), 16000), SMALL)


# --- augmentation ---------------------------------------------------------

def test_trim_or_pad():
    x = RNG.normal(size=100)
    np.testing.assert_array_equal(trim_or_pad(x, 100), x)
    y = trim_or_pad(x[:40], 100)
    np.testing.assert_array_equal(y[:40], x[:40])
    assert not y[40:].any()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 200), st.integers(1, 200), st.integers(0, 1000))
def test_trim_is_contiguous_slice(n_in, n_out, seed):
    x = np.arange(n_in, dtype=float)
    y = trim_or_pad(x, n_out, seed=seed)
    assert len(y) == n_out
    if n_in > n_out:
        assert np.all(np.diff(y) == 1.0) and y[0] >= 0 and y[-1] < n_in


def test_mix_infinite_snr_is_passthrough():
    t = RNG.uniform(-0.5, 0.5, 500)
    np.testing.assert_array_equal(mix_additive(t, RNG.normal(size=500), np.inf), t)


def test_mix_equal_power_at_zero_db():
    from asdspoof.frontend import scale_to_snr
    t = RNG.normal(size=1000) * 0.1
    n = RNG.normal(size=1000) * 0.7
    assert rms(scale_to_snr(t, n, 0.0)) == pytest.approx(rms(t), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-5, 30))
def test_mix_snr_accuracy(seed, snr):
    r = np.random.default_rng(seed)
    t = r.normal(size=800) * 0.05
    n = r.normal(size=1200) * 0.05
    out = mix_additive(t, n, snr, seed=seed)
    assert len(out) == len(t)
    if np.abs(out).max() < 1.0:                 # clipping would alter the measurement
        measured = 20 * np.log10(rms(t) / rms(out - t))
        assert abs(measured - snr) < 0.1


def test_mix_silent_noise():
    with pytest.raises(DegenerateInputError):
        mix_additive(np.ones(10) * 0.1, np.zeros(10), 10.0)


def test_reverb_identities():
    t = RNG.uniform(-0.5, 0.5, 300)
    t[0] = 0.9                                    # peak survives any shift-truncation below
    np.testing.assert_allclose(convolve_reverb(t, np.array([1.0])), t, atol=1e-15)
    k = 7
    rir = np.zeros(10)
    rir[k] = 1.0
    out = convolve_reverb(t, rir)
    np.testing.assert_allclose(out[k:], t[:-k], atol=1e-12)
    assert not out[:k].any()


def test_reverb_matches_naive_convolution():
    t = RNG.uniform(-1, 1, 200)
    h = RNG.normal(size=37)
    naive = np.array([sum(t[i - j] * h[j] for j in range(len(h)) if 0 <= i - j) for i in range(len(t))])
    naive *= np.abs(t).max() / np.abs(naive).max()
    out = convolve_reverb(t, h)
    assert len(out) == len(t)
    np.testing.assert_allclose(out, naive, atol=1e-10)


def test_augmenter_seeded_and_length_preserving():
    noises = {"noise": [RNG.normal(size=700)], "music": [RNG.normal(size=300)]}
    rirs = [np.r_[1.0, RNG.normal(size=20) * 0.3]]
    aug = WaveformAugmenter(noises, rirs, p_noise=1.0, p_reverb=1.0)
    x = RNG.uniform(-0.3, 0.3, 500)
    a = aug(x, np.random.default_rng(3))
    b = aug(x, np.random.default_rng(3))
    assert np.array_equal(a, b) and len(a) == len(x)
    assert not np.array_equal(a, x)
    assert not WaveformAugmenter().active
    np.testing.assert_array_equal(WaveformAugmenter()(x, np.random.default_rng(0)), x)


def test_augmenter_from_dirs(tmp_path):
    (tmp_path / "noise" / "music").mkdir(parents=True)
    (tmp_path / "rir").mkdir()
    write_wav(tmp_path / "noise" / "music" / "a.wav", Waveform(RNG.uniform(-.5, .5, 400), 8000))
    write_wav(tmp_path / "rir" / "r.wav", Waveform(np.r_[0.9, np.zeros(5)], 8000))
    aug = WaveformAugmenter.from_dirs(tmp_path / "noise", tmp_path / "rir")
    assert set(aug.noises) == {"music"} and len(aug.rirs) == 1


# --- other containers and rates -------------------------------------------

def test_flac_matches_wav(tmp_path):
    sf = pytest.importorskip("soundfile")
    from asdspoof.frontend import read_audio
    codes = RNG.integers(-30000, 30000, 800).astype(np.int16)
    sf.write(tmp_path / "a.flac", codes, 16000, subtype="PCM_16")
    (tmp_path / "a.wav").write_bytes(_wav_bytes(codes.astype("<i2").tobytes(), rate=16000))
    f, w = read_audio(tmp_path / "a.flac"), read_audio(tmp_path / "a.wav")
    assert f.sample_rate == w.sample_rate == 16000
    np.testing.assert_array_equal(f.samples, w.samples)


def test_resample_preserves_tone():
    from asdspoof.frontend import resample
    x = np.sin(2 * np.pi * 440 * np.arange(16000) / 16000)
    y = resample(x, 16000, 22050)
    assert len(y) == 22050
    ref = np.sin(2 * np.pi * 440 * np.arange(22050) / 22050)
    assert np.abs(y[500:-500] - ref[500:-500]).max() < 1e-2
    assert np.array_equal(resample(x, 8000, 8000), x)
