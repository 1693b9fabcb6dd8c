"""Three training stages: GE2E pre-training, adversarial fine-tuning, distillation.

Every stage draws its randomness (crops, augmentation, shuffling, AEG pair
order) from generators seeded by ``(seed, stage, epoch)``, so a rerun in
single-threaded mode reproduces the same losses.
"""

from __future__ import annotations

import contextlib
import copy
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .aeg import AdvSample, active_aeg_epoch, adv_set_hash, default_sample_count, static_aeg_build
from .config import AEG_MODES, Config
from .data import ADV_LABEL, ADVERSARIAL, CONDITIONS, Clip, by_condition
from .errors import ConfigurationError, ContractError
from .frontend import FeatureConfig, WaveformAugmenter, log_mel_fast, trim_or_pad
from .losses import GE2EBatch, GE2EHead, ge2e_loss, kd_loss, nll_loss
from .metrics import ScoreRecord, eer
from .model import ModelConfig, ResNetSE, freeze, state_hash
from .optim import Adam, lr_at

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "distill")
_STAGE_ID = {s: i for i, s in enumerate(STAGES)}


@contextlib.contextmanager
def single_threaded(n: int = 1):
    """Pin BLAS/OpenMP pools so reductions run in a fixed order."""
    with threadpool_limits(limits=n):
        yield


def stage_rng(seed: int, stage: str, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, _STAGE_ID[stage], epoch, stream])


class TrainLog:
    """One line per optimisation step: stage, epoch, step, lr, loss."""

    def __init__(self, path: Optional[Union[str, os.PathLike]] = None):
        self.path = path
        self.records: List[Tuple[str, int, int, float, float]] = []

    def step(self, stage: str, epoch: int, step: int, lr: float, loss: float) -> None:
        self.records.append((stage, epoch, step, lr, loss))
        self.write(f"stage={stage} epoch={epoch} step={step} lr={lr!r} loss={loss!r}")

    def write(self, line: str) -> None:
        logger.debug(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def losses(self, stage: Optional[str] = None) -> List[float]:
        return [r[4] for r in self.records if stage is None or r[0] == stage]


@dataclass
class StageResult:
    stage: str
    model: ResNetSE
    best_epoch: int
    history: List[Dict[str, float]] = field(default_factory=list)
    adv_hashes: List[str] = field(default_factory=list)
    adv_samples: List[AdvSample] = field(default_factory=list)

    def meta(self) -> dict:
        return {"stage": self.stage, "best_epoch": self.best_epoch, "history": self.history,
                "adv_hashes": self.adv_hashes}


# ---------------------------------------------------------------------------
# features and batches
# ---------------------------------------------------------------------------

def build_augmenter(cfg: Config) -> Optional[WaveformAugmenter]:
    a = cfg.augment
    if not a.enabled:
        return None
    aug = WaveformAugmenter.from_dirs(a.noise_dir, a.rir_dir, cfg.features.sample_rate,
                                      p_noise=a.p_noise, p_reverb=a.p_reverb,
                                      snr_range=(a.snr_low, a.snr_high))
    return aug if aug.active else None


def segment_length(cfg: Config) -> int:
    return int(round(cfg.data.segment_s * cfg.features.sample_rate))


def clip_features(samples: Sequence[np.ndarray], fcfg: FeatureConfig, n_samples: int,
                  rng: Optional[np.random.Generator] = None,
                  augmenter: Optional[WaveformAugmenter] = None) -> np.ndarray:
    """Crop/pad, optionally augment, and stack log-Mel features as ``[B, 1, n_mels, T]``."""
    feats = []
    for x in samples:
        x = trim_or_pad(x, n_samples, seed=rng if rng is not None else 0)
        if augmenter is not None and rng is not None:
            x = augmenter(x, rng)
        feats.append(log_mel_fast(x, fcfg))
    return np.stack(feats)[:, None]


def sample_ge2e_batch(clips: Union[Sequence[Clip], Dict[str, List[Clip]]], N: int, M: int,
                      seed) -> List[List[Clip]]:
    """N conditions by M clips, drawn without replacement inside each condition."""
    groups = by_condition(clips) if not isinstance(clips, dict) else clips
    groups = {c: v for c, v in groups.items() if c != ADVERSARIAL}
    order = [c for c in CONDITIONS if c in groups] + sorted(set(groups) - set(CONDITIONS))
    if len(order) < N:
        raise ConfigurationError(f"GE2E batch needs N={N} conditions, the data has {len(order)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = order if len(order) == N else [order[i] for i in sorted(rng.choice(len(order), N, replace=False))]
    for c in chosen:
        if len(groups[c]) < M:
            raise ConfigurationError(
                f"condition {c} has {len(groups[c])} clips, a GE2E batch needs M={M}")
    return [[groups[c][i] for i in rng.choice(len(groups[c]), M, replace=False)] for c in chosen]


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def cm_scores(logits: np.ndarray, mode: str = "llr") -> np.ndarray:
    """Bona fide vs rest score from class logits (bona fide is class 0)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if mode == "bonafide_logprob":
        return logp[:, 0]
    if mode != "llr":
        raise ConfigurationError(f"unknown score mode {mode!r}")
    rest = logp[:, 1:]
    m = rest.max(axis=1)
    return logp[:, 0] - (m + np.log(np.exp(rest - m[:, None]).sum(axis=1)))


def predict_logits(model: ResNetSE, feats: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(feats), batch_size):
            out.append(model(feats[i:i + batch_size])[1].data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def score_utterance(model: ResNetSE, clip, fcfg: FeatureConfig, mode: str = "llr",
                    n_samples: Optional[int] = None) -> float:
    samples = clip.samples if hasattr(clip, "samples") else np.asarray(clip, dtype=np.float64)
    feats = clip_features([samples], fcfg, n_samples or len(samples))
    return float(cm_scores(predict_logits(model, feats), mode)[0])


def score_clips(model: ResNetSE, clips: Sequence[Clip], cfg: Config) -> List[ScoreRecord]:
    """Scores for key-bearing clips; adversarial-class clips are skipped."""
    keep = [c for c in clips if c.condition != ADVERSARIAL]
    if not keep:
        return []
    feats = clip_features([c.samples for c in keep], cfg.features, segment_length(cfg))
    scores = cm_scores(predict_logits(model, feats), cfg.scoring.mode)
    return [ScoreRecord(c.utt_id, c.key, float(s)) for c, s in zip(keep, scores)]


def _validate(model: ResNetSE, dev: Sequence[Clip], cfg: Config) -> Tuple[float, float]:
    keep = [c for c in dev if c.condition != ADVERSARIAL]
    feats = clip_features([c.samples for c in keep], cfg.features, segment_length(cfg))
    logits = predict_logits(model, feats)
    labels = np.array([c.label for c in keep])
    dev_nll = float(nll_loss(logits, labels).data)
    recs = [ScoreRecord(c.utt_id, c.key, float(s))
            for c, s in zip(keep, cm_scores(logits, cfg.scoring.mode))]
    return eer(recs), dev_nll


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def pretrain_ge2e(model: ResNetSE, train: Sequence[Clip], cfg: Config, seed: int = 0,
                  log: Optional[TrainLog] = None) -> StageResult:
    """Metric learning over spoofing conditions; keeps the lowest-mean-loss epoch.

    The GE2E head (w, b) only shapes the loss and is dropped afterwards.
    """
    log = log or TrainLog()
    pc = cfg.pretrain
    N, M = pc.n_conditions, pc.utts_per_condition
    groups = {c: v for c, v in by_condition(train).items() if c != ADVERSARIAL}
    head = GE2EHead()
    opt = Adam(model.parameters() + head.parameters(), cfg.optim)
    augmenter = build_augmenter(cfg)
    n_seg = segment_length(cfg)
    steps = pc.steps_per_epoch or max(1, min(len(v) for v in groups.values()) // M)
    best, best_loss, best_epoch, history = None, np.inf, -1, []
    global_step = 0
    model.train()
    for epoch in range(pc.epochs):
        lr = lr_at(epoch, cfg.optim)
        rng = stage_rng(seed, "pretrain", epoch)
        losses = []
        for _ in range(steps):
            batch = sample_ge2e_batch(groups, N, M, rng)
            flat = [c.samples for row in batch for c in row]
            feats = clip_features(flat, cfg.features, n_seg, rng, augmenter)
            emb = model.embedding(feats)
            loss = ge2e_loss(GE2EBatch(T.reshape(emb, (N, M, -1))), head)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            head.clamp()
            losses.append(float(loss.data))
            log.step("pretrain", epoch, global_step, lr, losses[-1])
            global_step += 1
        mean = float(np.mean(losses))
        history.append({"epoch": epoch, "loss": mean})
        if mean < best_loss:
            best, best_loss, best_epoch = model.state_dict(), mean, epoch
    model.load_state_dict(best)
    model.eval()
    return StageResult("pretrain", model, best_epoch, history)


def _supervised_epoch(stage: str, model: ResNetSE, opt: Adam, items: List[Tuple[np.ndarray, int]],
                      cfg: Config, batch_size: int, epoch: int, seed: int, log: TrainLog,
                      augmenter, step0: int, teacher: Optional[ResNetSE] = None) -> Tuple[float, int]:
    lr = lr_at(epoch, cfg.optim)
    rng = stage_rng(seed, stage, epoch)
    order = rng.permutation(len(items))
    n_seg = segment_length(cfg)
    losses = []
    step = step0
    model.train()
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        feats = clip_features([items[j][0] for j in idx], cfg.features, n_seg, rng, augmenter)
        labels = np.array([items[j][1] for j in idx])
        _, logits = model(feats)
        if teacher is None:
            loss = nll_loss(logits, labels)
        else:
            with T.no_grad():
                t_logits = teacher(feats)[1].data
            loss = kd_loss(logits, t_logits, labels, cfg.distill.temperature, cfg.distill.gamma)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        losses.append(float(loss.data))
        log.step(stage, epoch, step, lr, losses[-1])
        step += 1
    return float(np.mean(losses)), step


def finetune_adversarial(model: ResNetSE, train: Sequence[Clip], dev: Sequence[Clip], cfg: Config,
                         aeg_mode: Optional[str] = None, seed: int = 0,
                         log: Optional[TrainLog] = None) -> StageResult:
    """NLL over condition labels with optional adversarial-speaker injection.

    The classifier is rebuilt with 8 outputs when AEG is on, 7 otherwise.
    Model selection: lowest dev EER, ties broken by dev NLL.
    """
    log = log or TrainLog()
    mode = cfg.finetune.aeg if aeg_mode is None else aeg_mode
    if mode not in AEG_MODES:
        raise ConfigurationError(f"aeg mode must be one of {AEG_MODES}, got {mode!r}")
    n_classes = ADV_LABEL + 1 if mode != "none" else len(CONDITIONS)
    model.reset_classifier(n_classes, seed)
    n_adv = default_sample_count(cfg.aeg, len(train))
    adv: List[AdvSample] = []
    if mode == "static":
        adv = static_aeg_build(freeze(model), train, cfg.aeg, cfg.features, n_adv, seed)
    base = [(c.samples, c.label) for c in train if c.condition != ADVERSARIAL]
    opt = Adam(model.parameters(), cfg.optim)
    augmenter = build_augmenter(cfg)
    best, best_key, best_epoch, history, hashes = None, (np.inf, np.inf), -1, [], []
    step = 0
    for epoch in range(cfg.finetune.epochs):
        if mode == "active":
            adv = active_aeg_epoch(freeze(model), train, cfg.aeg, cfg.features, n_adv, seed + epoch)
        if mode != "none":
            hashes.append(adv_set_hash(adv))
            log.write(f"stage=finetune epoch={epoch} aeg={mode} adv_samples={len(adv)} "
                      f"adv_hash={hashes[-1][:16]}")
        items = base + [(s.perturbed, s.label) for s in adv]
        loss, step = _supervised_epoch("finetune", model, opt, items, cfg, cfg.finetune.batch_size,
                                       epoch, seed, log, augmenter, step)
        dev_eer, dev_nll = _validate(model, dev, cfg)
        history.append({"epoch": epoch, "loss": loss, "dev_eer": dev_eer, "dev_nll": dev_nll})
        if (dev_eer, dev_nll) < best_key:
            best, best_key, best_epoch = model.state_dict(), (dev_eer, dev_nll), epoch
    model.load_state_dict(best)
    model.eval()
    return StageResult("finetune", model, best_epoch, history, hashes, list(adv))


def distill_student(teacher: ResNetSE, student_config: ModelConfig, train: Sequence[Clip],
                    dev: Sequence[Clip], cfg: Config, seed: int = 0,
                    log: Optional[TrainLog] = None) -> StageResult:
    """KD from a frozen teacher into a fresh student; no adversarial generation here."""
    log = log or TrainLog()
    if student_config.n_classes != teacher.config.n_classes:
        raise ContractError(f"student has {student_config.n_classes} classes, "
                            f"teacher has {teacher.config.n_classes}")
    before = state_hash(teacher)
    frozen = freeze(teacher)
    student = ResNetSE(student_config, seed=seed)
    opt = Adam(student.parameters(), cfg.optim)
    augmenter = build_augmenter(cfg)
    items = [(c.samples, c.label) for c in train if c.condition != ADVERSARIAL]
    best, best_key, best_epoch, history = None, (np.inf, np.inf), -1, []
    step = 0
    for epoch in range(cfg.distill.epochs):
        loss, step = _supervised_epoch("distill", student, opt, items, cfg, cfg.distill.batch_size,
                                       epoch, seed, log, augmenter, step, teacher=frozen)
        dev_eer, dev_nll = _validate(student, dev, cfg)
        history.append({"epoch": epoch, "loss": loss, "dev_eer": dev_eer, "dev_nll": dev_nll})
        if (dev_eer, dev_nll) < best_key:
            best, best_key, best_epoch = student.state_dict(), (dev_eer, dev_nll), epoch
    if state_hash(teacher) != before:
        raise ContractError("teacher weights changed during distillation")
    student.load_state_dict(best)
    student.eval()
    return StageResult("distill", student, best_epoch, history)
