"""Protocol files, labelled clips and the synthetic desk-scale corpus."""

from __future__ import annotations

import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, ParseError
from .frontend import AUDIO_SUFFIXES, Waveform, load_audio, write_wav

BONAFIDE = "bonafide"
SPOOF = "spoof"
ADVERSARIAL = "ADV"
CONDITIONS = (BONAFIDE, "A01", "A02", "A03", "A04", "A05", "A06")
CONDITION_INDEX = {c: i for i, c in enumerate(CONDITIONS)}
CONDITION_INDEX[ADVERSARIAL] = len(CONDITIONS)
ADV_LABEL = CONDITION_INDEX[ADVERSARIAL]

_ATTACK_RE = re.compile(r"^A\d\d$")

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class ProtocolEntry:
    speaker_id: str
    utt_id: str
    attack_id: str
    key: str

    @property
    def condition(self) -> str:
        return BONAFIDE if self.key == BONAFIDE else self.attack_id


def _validate_entry(entry: ProtocolEntry, line_no: Optional[int] = None) -> None:
    if entry.key not in (BONAFIDE, SPOOF):
        raise ParseError(f"key must be 'bonafide' or 'spoof', got {entry.key!r}", line_no)
    if entry.key == BONAFIDE and entry.attack_id != "-":
        raise ParseError(f"bonafide entry {entry.utt_id} carries attack {entry.attack_id!r}", line_no)
    if entry.key == SPOOF and not _ATTACK_RE.match(entry.attack_id):
        raise ParseError(f"spoof entry {entry.utt_id} has invalid attack id {entry.attack_id!r}",
                         line_no)


def parse_protocol(path: PathLike) -> List[ProtocolEntry]:
    """Read a 5-column ASVspoof LA protocol: ``speaker utt - attack key``."""
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 5:
                raise ParseError(f"expected 5 columns, got {len(parts)}", line_no)
            speaker, utt, _, attack, key = parts
            entry = ProtocolEntry(speaker, utt, attack, key)
            _validate_entry(entry, line_no)
            if utt in seen:
                raise ParseError(f"duplicate utterance id {utt}", line_no)
            seen.add(utt)
            entries.append(entry)
    return entries


def write_protocol(path: PathLike, entries: Iterable[ProtocolEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            _validate_entry(e)
            fh.write(f"{e.speaker_id} {e.utt_id} - {e.attack_id} {e.key}\n")


@dataclass
class Clip:
    utt_id: str
    speaker_id: str
    condition: str
    samples: np.ndarray
    sample_rate: int

    @property
    def key(self) -> str:
        return BONAFIDE if self.condition == BONAFIDE else SPOOF

    @property
    def label(self) -> int:
        try:
            return CONDITION_INDEX[self.condition]
        except KeyError:
            raise ConfigurationError(
                f"{self.utt_id}: condition {self.condition!r} has no training label "
                f"(known: {', '.join(CONDITIONS)})") from None

    @property
    def waveform(self) -> Waveform:
        return Waveform(self.samples, self.sample_rate)


def load_clips(entries: Sequence[ProtocolEntry], wav_dir: PathLike,
               sample_rate: Optional[int] = None) -> List[Clip]:
    """Read ``<utt_id>.wav`` or ``<utt_id>.flac`` per entry, resampled to ``sample_rate``."""
    wav_dir = Path(wav_dir)
    clips = []
    for e in entries:
        path = next((p for p in (wav_dir / f"{e.utt_id}{ext}" for ext in AUDIO_SUFFIXES)
                     if p.exists()), None)
        if path is None:
            raise ConfigurationError(f"audio for {e.utt_id} not found in {wav_dir} "
                                     f"(tried {', '.join(AUDIO_SUFFIXES)})")
        w = load_audio(path, sample_rate)
        clips.append(Clip(e.utt_id, e.speaker_id, e.condition, w.samples, w.sample_rate))
    return clips


def split_entries(entries: Sequence[ProtocolEntry],
                  fractions: Sequence[float] = (0.5, 0.2, 0.3)) -> Dict[str, List[ProtocolEntry]]:
    """Deterministic train/dev/eval split within every (speaker, condition) group.

    The first ``round(f_train * n)`` utterances of a group (file order) go to
    train, the next ``round(f_dev * n)`` to dev and the rest to eval.
    """
    groups: Dict[Tuple[str, str], List[ProtocolEntry]] = defaultdict(list)
    for e in entries:
        groups[(e.speaker_id, e.condition)].append(e)
    out = {"train": [], "dev": [], "eval": []}
    position = {}
    for members in groups.values():
        n = len(members)
        n_train = int(round(fractions[0] * n))
        n_dev = int(round(fractions[1] * n))
        for i, e in enumerate(members):
            position[e.utt_id] = "train" if i < n_train else "dev" if i < n_train + n_dev else "eval"
    for e in entries:
        out[position[e.utt_id]].append(e)
    return out


def by_condition(clips: Sequence[Clip]) -> Dict[str, List[Clip]]:
    out: Dict[str, List[Clip]] = defaultdict(list)
    for c in clips:
        out[c.condition].append(c)
    return dict(out)


def same_speaker_pairs(clips: Sequence[Clip]) -> List[Tuple[Clip, Clip]]:
    """All ordered pairs of distinct bona fide clips sharing a speaker."""
    groups: Dict[str, List[Clip]] = defaultdict(list)
    for c in clips:
        if c.condition == BONAFIDE:
            groups[c.speaker_id].append(c)
    pairs = []
    for spk in sorted(groups):
        members = groups[spk]
        pairs.extend((a, b) for a in members for b in members if a is not b)
    return pairs


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 3
    clips_per_condition: int = 10
    duration_s: float = 1.0
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigurationError("n_speakers must be >= 2 so same-speaker pairs exist for BIM")
        if self.clips_per_condition < 1 or self.duration_s <= 0 or self.sample_rate <= 0:
            raise ConfigurationError(f"synthetic corpus settings must be positive: {self}")


def _harmonics(t, f0_track, rng, tilt=1.0, shift=0.0, nyquist=4000.0):
    phase = 2 * np.pi * np.cumsum(f0_track) / (1.0 / (t[1] - t[0]))
    out = np.zeros_like(t)
    h = 1
    while h * f0_track.max() + shift < 0.9 * nyquist:
        offset = 2 * np.pi * shift * t
        out += np.sin(h * phase + offset + rng.uniform(0, 2 * np.pi)) / h ** tilt
        h += 1
    return out


def _bandnoise(rng, n, sr, lo, hi):
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (np.abs(x).max() + 1e-12)


def synth_clip(condition: str, speaker: int, clip: int, spec: SynthSpec) -> np.ndarray:
    """One synthetic utterance; depends only on its arguments."""
    base = np.random.default_rng([spec.seed, 7919, speaker])
    f0 = base.uniform(95.0, 210.0)
    rng = np.random.default_rng([spec.seed, speaker, CONDITION_INDEX[condition], clip])
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    t = np.arange(n) / sr
    nyq = sr / 2.0
    f0 = f0 * rng.uniform(0.97, 1.03)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))
    syllable = 0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t)

    if condition == BONAFIDE:
        x = _harmonics(t, f0 * vibrato, rng, nyquist=nyq) * syllable
    elif condition == "A01":   # over-smoothed: steep tilt, no vibrato, linear fade-in
        x = _harmonics(t, np.full(n, f0), rng, tilt=2.5, nyquist=nyq) * (0.2 + 0.8 * t / t[-1])
    elif condition == "A02":   # fast amplitude modulation
        x = _harmonics(t, f0 * vibrato, rng, nyquist=nyq) * (0.55 + 0.45 * np.sin(2 * np.pi * 9.0 * t))
    elif condition == "A03":   # pitch glide
        glide = f0 * (1.0 + 0.6 * t / t[-1])
        x = _harmonics(t, glide, rng, nyquist=nyq) * syllable
    elif condition == "A04":   # gated band-noise bursts over the voice
        gate = (np.sin(2 * np.pi * 2.0 * t) > 0).astype(float)
        x = _harmonics(t, f0 * vibrato, rng, nyquist=nyq) * syllable \
            + 0.8 * gate * _bandnoise(rng, n, sr, 0.15 * nyq, 0.4 * nyq)
    elif condition == "A05":   # frequency-shifted partials, inverted envelope
        x = _harmonics(t, f0 * vibrato, rng, shift=0.03 * nyq, nyquist=nyq) * (1.2 - syllable)
    elif condition == "A06":   # periodic splice dropouts
        x = _harmonics(t, f0 * vibrato, rng, nyquist=nyq) * syllable
        x = x * ((t % 0.25) > 0.06)
    else:
        raise ConfigurationError(f"unknown synthetic condition {condition!r}")
    x = x / (np.abs(x).max() + 1e-12) * rng.uniform(0.4, 0.6)
    x = x + 0.003 * rng.normal(size=n)
    return np.clip(x, -1.0, 1.0)


def synth_dataset(spec: SynthSpec) -> Tuple[List[Clip], List[ProtocolEntry]]:
    """Speakers x conditions x clips synthetic corpus with an LA-style protocol."""
    clips, protocol = [], []
    for spk in range(spec.n_speakers):
        speaker_id = f"SPK{spk:03d}"
        for cond in CONDITIONS:
            for k in range(spec.clips_per_condition):
                utt = f"SYN_{speaker_id}_{cond}_{k:04d}"
                x = synth_clip(cond, spk, k, spec)
                # quantise like a stored 16-bit file so in-memory and on-disk clips agree
                x = np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0
                clips.append(Clip(utt, speaker_id, cond, x, spec.sample_rate))
                protocol.append(ProtocolEntry(speaker_id, utt, "-" if cond == BONAFIDE else cond,
                                              BONAFIDE if cond == BONAFIDE else SPOOF))
    return clips, protocol


def synth_augmentation_banks(spec: SynthSpec, n_each: int = 3):
    """Synthetic stand-ins for noise (music/speech/noise categories) and RIR folders."""
    sr = spec.sample_rate
    n = int(round(2.0 * spec.duration_s * sr))
    t = np.arange(n) / sr
    noises = {"noise": [], "music": [], "speech": []}
    rirs = []
    for i in range(n_each):
        rng = np.random.default_rng([spec.seed, 104729, i])
        white = rng.normal(size=n)
        pink = np.cumsum(white)
        pink -= np.convolve(pink, np.ones(64) / 64, mode="same")
        noises["noise"].append((white if i % 2 == 0 else pink) / 4.0)
        chord = sum(np.sin(2 * np.pi * f * t) for f in rng.uniform(200, 0.4 * sr, 3))
        noises["music"].append(0.3 * chord * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t)))
        babble = sum(_harmonics(t, np.full(n, rng.uniform(90, 250)), rng, nyquist=sr / 2)
                     for _ in range(4))
        noises["speech"].append(0.9 * babble / (np.abs(babble).max() + 1e-12))
        m = int(rng.uniform(0.05, 0.2) * sr)
        tail = rng.normal(size=m) * np.exp(-np.arange(m) / (rng.uniform(0.01, 0.05) * sr))
        tail[0] = 1.0
        rirs.append(tail / np.abs(tail).max())
    noises = {k: [np.clip(x, -1, 1) for x in v] for k, v in noises.items()}
    return noises, rirs


def write_corpus(out_dir: PathLike, spec: SynthSpec) -> Path:
    """Write ``wav/``, ``protocol.txt`` plus ``noise/`` and ``rir/`` banks under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    clips, protocol = synth_dataset(spec)
    for c in clips:
        write_wav(out / "wav" / f"{c.utt_id}.wav", c.waveform)
    write_protocol(out / "protocol.txt", protocol)
    noises, rirs = synth_augmentation_banks(spec)
    for cat, items in noises.items():
        (out / "noise" / cat).mkdir(parents=True, exist_ok=True)
        for i, x in enumerate(items):
            write_wav(out / "noise" / cat / f"{cat}_{i:02d}.wav", Waveform(x, spec.sample_rate))
    (out / "rir").mkdir(parents=True, exist_ok=True)
    for i, h in enumerate(rirs):
        write_wav(out / "rir" / f"rir_{i:02d}.wav", Waveform(h, spec.sample_rate))
    return out
