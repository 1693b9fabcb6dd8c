"""scikit-learn style wrappers around the feature front end and the countermeasure."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .aeg import AegConfig
from .config import AugmentConfig, Config, DataConfig, DistillConfig, FinetuneConfig, PretrainConfig
from .data import ADV_LABEL, ADVERSARIAL, CONDITIONS, Clip
from .frontend import FeatureConfig
from .model import ModelConfig, ResNetSE
from .optim import OptimConfig
from .trainer import (TrainLog, cm_scores, clip_features, distill_student, finetune_adversarial,
                      predict_logits, pretrain_ge2e, single_threaded)
from .validation import check_conditions, check_same_length, check_waveforms


class LogMelTransformer(TransformerMixin, BaseEstimator):
    """Waveforms to instance-normalised log-Mel features ``[n, 1, n_mels, frames]``.

    Clips are cropped or zero-padded to ``n_samples`` (default: the longest clip seen in fit).
    """

    def __init__(self, n_mels: int = 40, win_ms: float = 25.0, hop_ms: float = 10.0,
                 n_fft: int = 512, sample_rate: int = 22050, n_samples: Optional[int] = None):
        self.n_mels = n_mels
        self.win_ms = win_ms
        self.hop_ms = hop_ms
        self.n_fft = n_fft
        self.sample_rate = sample_rate
        self.n_samples = n_samples

    def _feature_config(self) -> FeatureConfig:
        return FeatureConfig(n_mels=self.n_mels, win_ms=self.win_ms, hop_ms=self.hop_ms,
                             n_fft=self.n_fft, sample_rate=self.sample_rate)

    def fit(self, X, y=None):
        cfg = self._feature_config()
        waves = check_waveforms(X, min_length=cfg.win_length)
        self.n_samples_ = self.n_samples or max(len(w) for w in waves)
        self.n_frames_ = cfg.n_frames(self.n_samples_)
        return self

    def transform(self, X):
        check_is_fitted(self, "n_samples_")
        waves = check_waveforms(X)
        return clip_features(waves, self._feature_config(), self.n_samples_)


class ResNetSECountermeasure(ClassifierMixin, BaseEstimator):
    """Spoofing-condition classifier whose ``decision_function`` is the bona fide CM score.

    With ``teacher`` set to a fitted countermeasure, ``fit`` distils that
    teacher into this (smaller) network instead of fine-tuning. Model
    selection runs on the training clips themselves; use the CLI pipeline
    for a held-out dev split.
    """

    def __init__(self, channels: Tuple[int, ...] = (32, 64, 128, 256),
                 blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2),
                 strides: Tuple[int, ...] = (1, 2, 2, 2), sample_rate: int = 22050,
                 n_fft: int = 512, segment_s: Optional[float] = None, pretrain_epochs: int = 0,
                 epochs: int = 20, batch_size: int = 32, lr: float = 3e-4, aeg: str = "none",
                 aeg_alpha: float = 3.0, aeg_amplitude_unit: float = 1.0,
                 teacher: Optional["ResNetSECountermeasure"] = None, temperature: float = 5.0,
                 gamma: float = 0.5, score_mode: str = "llr", random_state: int = 0):
        self.channels = channels
        self.blocks_per_stage = blocks_per_stage
        self.strides = strides
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.segment_s = segment_s
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.aeg = aeg
        self.aeg_alpha = aeg_alpha
        self.aeg_amplitude_unit = aeg_amplitude_unit
        self.teacher = teacher
        self.temperature = temperature
        self.gamma = gamma
        self.score_mode = score_mode
        self.random_state = random_state

    def _config(self, segment_s: float) -> Config:
        return Config(
            features=FeatureConfig(sample_rate=self.sample_rate, n_fft=self.n_fft),
            teacher=ModelConfig(channels=tuple(self.channels),
                                blocks_per_stage=tuple(self.blocks_per_stage),
                                strides=tuple(self.strides)),
            optim=OptimConfig(lr0=self.lr),
            pretrain=PretrainConfig(epochs=self.pretrain_epochs, utts_per_condition=2),
            finetune=FinetuneConfig(epochs=self.epochs, batch_size=self.batch_size, aeg=self.aeg),
            distill=DistillConfig(epochs=self.epochs, batch_size=self.batch_size,
                                  temperature=self.temperature, gamma=self.gamma),
            aeg=AegConfig(alpha=self.aeg_alpha, amplitude_unit=self.aeg_amplitude_unit),
            augment=AugmentConfig(enabled=False),
            data=DataConfig(segment_s=segment_s),
        ).replace("scoring", mode=self.score_mode)

    def fit(self, X, y, speakers: Optional[Sequence[str]] = None):
        waves = check_waveforms(X)
        labels = check_conditions(y, len(waves))
        speakers = ["spk"] * len(waves) if speakers is None else list(speakers)
        check_same_length(waves, speakers, "speakers")
        segment = self.segment_s or max(len(w) for w in waves) / self.sample_rate
        cfg = self._config(segment)
        clips = [Clip(f"utt{i:06d}", str(s), str(c), w, self.sample_rate)
                 for i, (w, c, s) in enumerate(zip(waves, labels, speakers))]
        seed = self.random_state
        with single_threaded():
            if self.teacher is not None:
                check_is_fitted(self.teacher, "model_")
                t = self.teacher.model_
                student = cfg.teacher.with_classes(t.config.n_classes)
                result = distill_student(t, student, clips, clips, cfg, seed, TrainLog())
            else:
                model = ResNetSE(cfg.teacher, seed=seed)
                if self.pretrain_epochs > 0:
                    model = pretrain_ge2e(model, clips, cfg, seed, TrainLog()).model
                result = finetune_adversarial(model, clips, clips, cfg, self.aeg, seed, TrainLog())
        self.model_ = result.model
        self.config_ = cfg
        self.history_ = result.history
        n = self.model_.config.n_classes
        self.classes_ = np.array(CONDITIONS + ((ADVERSARIAL,) if n > ADV_LABEL else ()), dtype=object)
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        waves = check_waveforms(X)
        n = int(round(self.config_.data.segment_s * self.sample_rate))
        with single_threaded():
            return predict_logits(self.model_, clip_features(waves, self.config_.features, n))

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self._logits(X), axis=1)]

    def decision_function(self, X) -> np.ndarray:
        """Bona fide CM score (higher means more likely bona fide)."""
        return cm_scores(self._logits(X), self.score_mode)
