"""Adversarial-speaker example generation with the basic iterative method.

Two same-speaker bona fide clips W1, W2 are taken; a perturbation D is
grown on W2 by signed-gradient ascent on the cosine similarity between
the embeddings of W1 and W2 + D. Accepted perturbed waveforms are
relabelled as the extra adversarial-speaker class.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import ADV_LABEL, ADVERSARIAL, Clip, same_speaker_pairs
from .errors import ConfigurationError, ContractError
from .frontend import FeatureConfig, Waveform, log_mel, write_wav
from .model import ResNetSE, freeze
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AegConfig:
    alpha: float = 3.0
    iterations: int = 5
    threshold: float = 0.4
    # perturbation bound; None means alpha * iterations (never binding)
    epsilon: Optional[float] = None
    # size of one alpha unit in normalised amplitude (1/32768 reads alpha as 16-bit LSBs)
    amplitude_unit: float = 1.0
    accept_below_threshold: bool = False
    # adversarial samples per build; None means 10% of the training clips
    n_samples: Optional[int] = None
    # pair attempts per build; None means every same-speaker pair
    max_attempts: Optional[int] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.iterations < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must lie in [-1, 1], got {self.threshold}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.amplitude_unit <= 0:
            raise ConfigurationError("amplitude_unit must be positive")

    @property
    def step(self) -> float:
        return self.alpha * self.amplitude_unit

    @property
    def bound(self) -> float:
        eps = self.alpha * self.iterations if self.epsilon is None else self.epsilon
        return eps * self.amplitude_unit

    def accepts(self, similarity: float) -> bool:
        if self.accept_below_threshold:
            return similarity < self.threshold
        return similarity > self.threshold

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class BimTrace:
    perturbation: np.ndarray
    similarities: List[float]
    final_similarity: float

    @property
    def initial_similarity(self) -> float:
        return self.similarities[0]


@dataclass
class AdvSample:
    perturbed: np.ndarray
    sample_rate: int
    source_ids: Tuple[str, str]
    speaker_id: str
    initial_similarity: float
    final_similarity: float
    label: int = ADV_LABEL

    @property
    def utt_id(self) -> str:
        return f"ADV_{self.source_ids[1]}_{self.source_ids[0]}"

    @property
    def waveform(self) -> Waveform:
        return Waveform(self.perturbed, self.sample_rate)

    def to_clip(self) -> Clip:
        return Clip(self.utt_id, self.speaker_id, ADVERSARIAL, self.perturbed, self.sample_rate)


def _embed(model: ResNetSE, signal, fcfg: FeatureConfig) -> Tensor:
    feats = log_mel(signal, fcfg)
    return model.embedding(T.reshape(feats, (1, 1) + feats.shape))[0]


def bim_loop(embed: Callable[[Tensor], Tensor], x1: np.ndarray, x2: np.ndarray,
             cfg: AegConfig) -> BimTrace:
    """BIM against any differentiable waveform-to-embedding map ``embed``."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    with T.no_grad():
        target = embed(Tensor(x1)).data

    # one clip against the tighter of the epsilon ball and the [-1, 1] amplitude range;
    # clipping D directly keeps |D| <= bound exact (x2 + D - x2 would round)
    lo = np.maximum(-cfg.bound, -1.0 - x2)
    hi = np.minimum(cfg.bound, 1.0 - x2)
    D = np.zeros_like(x2)
    sims = []
    for _ in range(cfg.iterations):
        d = Tensor(D.copy(), requires_grad=True)
        s = T.cosine_similarity(target, embed(T.add(x2, d)))
        if not s.requires_grad:
            raise ContractError("similarity is not on the tape; gradient w.r.t. D unavailable")
        T.backward(s, inputs=[d])
        sims.append(float(s.data))
        D = np.clip(D + cfg.step * np.sign(d.grad), lo, hi)
    with T.no_grad():
        final = float(T.cosine_similarity(target, embed(Tensor(x2 + D))).data)
    return BimTrace(D, sims, final)


def bim_attack(model: ResNetSE, w1, w2, cfg: AegConfig, fcfg: FeatureConfig) -> BimTrace:
    """Run the iterative signed-gradient ascent through front end and model.

    Neither the model (parameters, buffers, gradients) nor the inputs are modified.
    """
    if model.training:
        raise ContractError("BIM needs the model in eval mode")
    x1 = np.asarray(getattr(w1, "samples", w1), dtype=np.float64)
    x2 = np.asarray(getattr(w2, "samples", w2), dtype=np.float64)
    return bim_loop(lambda signal: _embed(model, signal, fcfg), x1, x2, cfg)


def bim_generate(model: ResNetSE, w1, w2, cfg: AegConfig, fcfg: FeatureConfig,
                 source_ids: Tuple[str, str] = ("w1", "w2"),
                 speaker_id: str = "") -> Optional[AdvSample]:
    """Perturb ``w2`` towards ``w1``; ``None`` when the final similarity is rejected."""
    trace = bim_attack(model, w1, w2, cfg, fcfg)
    if not cfg.accepts(trace.final_similarity):
        return None
    x2 = np.asarray(getattr(w2, "samples", w2), dtype=np.float64)
    return AdvSample(x2 + trace.perturbation, fcfg.sample_rate, tuple(source_ids), speaker_id,
                     trace.initial_similarity, trace.final_similarity)


def default_sample_count(cfg: AegConfig, n_train: int) -> int:
    return cfg.n_samples if cfg.n_samples is not None else max(1, int(round(0.1 * n_train)))


def _generate(model: ResNetSE, clips: Sequence[Clip], cfg: AegConfig, fcfg: FeatureConfig,
              n_samples: int, seed: int) -> List[AdvSample]:
    if n_samples <= 0:
        return []
    pairs = same_speaker_pairs(clips)
    if not pairs:
        raise ConfigurationError("no speaker has two bona fide clips; BIM needs same-speaker pairs")
    frozen = model if all(not p.requires_grad for p in model.parameters()) and not model.training \
        else freeze(model)
    order = np.random.default_rng(seed).permutation(len(pairs))
    if cfg.max_attempts is not None:
        order = order[:cfg.max_attempts]
    out = []
    for i in order:
        a, b = pairs[int(i)]
        sample = bim_generate(frozen, a.samples, b.samples, cfg, fcfg,
                              (a.utt_id, b.utt_id), a.speaker_id)
        if sample is not None:
            out.append(sample)
            if len(out) >= n_samples:
                break
    return out


def static_aeg_build(model: ResNetSE, clips: Sequence[Clip], cfg: AegConfig,
                     fcfg: FeatureConfig, n_samples: int, seed: int = 0) -> List[AdvSample]:
    """Build the adversarial set once, from the GE2E-pretrained model."""
    start = time.perf_counter()
    out = _generate(model, clips, cfg, fcfg, n_samples, seed)
    logger.info("static AEG: %d samples in %.2fs", len(out), time.perf_counter() - start)
    return out


def active_aeg_epoch(model: ResNetSE, clips: Sequence[Clip], cfg: AegConfig,
                     fcfg: FeatureConfig, n_samples: int, epoch_seed: int) -> List[AdvSample]:
    """Regenerate the adversarial set from a snapshot of the current model."""
    start = time.perf_counter()
    out = _generate(model, clips, cfg, fcfg, n_samples, epoch_seed)
    logger.info("active AEG (seed %d): %d samples in %.2fs", epoch_seed, len(out),
                time.perf_counter() - start)
    return out


def adv_set_hash(samples: Sequence[AdvSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update("|".join(s.source_ids).encode())
        h.update(np.ascontiguousarray(s.perturbed, dtype="<f8").tobytes())
    return h.hexdigest()


def write_sidecar(out_dir, samples: Sequence[AdvSample], cfg: AegConfig) -> Path:
    """Store adversarial WAVs (32-bit float) and a tab-separated manifest for audit."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    lines = ["utt_id\tsource_1\tsource_2\tspeaker\tinitial_s\tfinal_s\tconfig_hash"]
    for s in samples:
        write_wav(out / f"{s.utt_id}.wav", s.waveform, float32=True)
        lines.append(f"{s.utt_id}\t{s.source_ids[0]}\t{s.source_ids[1]}\t{s.speaker_id}\t"
                     f"{s.initial_similarity!r}\t{s.final_similarity!r}\t{digest}")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return out
