"""INI configuration: one section per pipeline stage, every default overridable.

Values are parsed into the typed dataclasses that the modules already use.
Relative paths are resolved against the directory of the INI file.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .aeg import AegConfig
from .errors import ConfigurationError
from .frontend import FeatureConfig
from .metrics import TdcfCosts
from .model import STUDENT_CHANNELS, ModelConfig
from .optim import OptimConfig

PathLike = Union[str, os.PathLike]

AEG_MODES = ("none", "static", "active")
SCORE_MODES = ("llr", "bonafide_logprob")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    n_conditions: int = 7
    utts_per_condition: int = 8
    # None: as many disjoint batches as the smallest condition allows
    steps_per_epoch: Optional[int] = None


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 32
    aeg: str = "none"

    def __post_init__(self):
        if self.aeg not in AEG_MODES:
            raise ConfigurationError(f"finetune.aeg must be one of {AEG_MODES}, got {self.aeg!r}")


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 20
    batch_size: int = 32
    temperature: float = 5.0
    gamma: float = 0.5


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    noise_dir: Optional[str] = None
    rir_dir: Optional[str] = None
    p_noise: float = 0.5
    p_reverb: float = 0.5
    snr_low: float = 5.0
    snr_high: float = 20.0

    def __post_init__(self):
        for name in ("p_noise", "p_reverb"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"augment.{name} must lie in [0, 1]")
        if self.snr_low > self.snr_high:
            raise ConfigurationError("augment.snr_low exceeds snr_high")


@dataclass(frozen=True)
class DataConfig:
    protocol: Optional[str] = None
    wav_dir: Optional[str] = None
    # separate dev/eval protocols (e.g. official partitions) replace the fractional split
    dev_protocol: Optional[str] = None
    dev_wav_dir: Optional[str] = None
    eval_protocol: Optional[str] = None
    eval_wav_dir: Optional[str] = None
    train_fraction: float = 0.5
    dev_fraction: float = 0.2
    eval_fraction: float = 0.3
    # training crops are trimmed or zero-padded to this length
    segment_s: float = 4.0

    @property
    def fractions(self) -> Tuple[float, float, float]:
        return (self.train_fraction, self.dev_fraction, self.eval_fraction)


@dataclass(frozen=True)
class ScoringConfig:
    mode: str = "llr"

    def __post_init__(self):
        if self.mode not in SCORE_MODES:
            raise ConfigurationError(f"scoring.mode must be one of {SCORE_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class RunConfig:
    workdir: str = "run"
    seed: int = 0
    threads: int = 1
    log_file: str = "train.log"


def _student_default() -> ModelConfig:
    return ModelConfig(channels=STUDENT_CHANNELS)


@dataclass(frozen=True)
class Config:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    teacher: ModelConfig = field(default_factory=ModelConfig)
    student: ModelConfig = field(default_factory=_student_default)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    aeg: AegConfig = field(default_factory=AegConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: TdcfCosts = field(default_factory=TdcfCosts)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list)
                              .encode()).hexdigest()

    def replace(self, section: str, **changes) -> "Config":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section),
                                                                         **changes)})


_PATH_KEYS = {("augment", "noise_dir"), ("augment", "rir_dir"), ("data", "protocol"),
              ("data", "wav_dir"), ("data", "dev_protocol"), ("data", "dev_wav_dir"),
              ("data", "eval_protocol"), ("data", "eval_wav_dir"), ("run", "workdir")}


def _convert(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _convert(raw, inner[0], where)
    if origin in (tuple, Tuple):
        item = args[0]
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(_convert(p, item, where) for p in parts)
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{where}: expected a boolean, got {raw!r}")
    if hint in (int, float):
        try:
            return hint(raw.strip())
        except ValueError:
            raise ConfigurationError(f"{where}: expected {hint.__name__}, got {raw!r}") from None
    return raw.strip()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _build_section(cls, name: str, items: Dict[str, str], base, root: Optional[Path]):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    changes = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigurationError(f"unknown key [{name}] {key}")
        value = _convert(raw, hints[key], f"[{name}] {key}")
        if (name, key) in _PATH_KEYS and value is not None and root is not None:
            value = str((root / value).resolve()) if not os.path.isabs(value) else value
        changes[key] = value
    if not changes:
        return base
    try:
        if name in ("teacher", "student") and "channels" in changes and "embedding_dim" not in changes:
            changes["embedding_dim"] = None
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from None


def parse_config(text: str, root: Optional[Path] = None, base: Optional[Config] = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    cfg = base or Config()
    sections = {f.name: f for f in dataclasses.fields(Config)}
    updates = {}
    for name in parser.sections():
        if name not in sections:
            raise ConfigurationError(f"unknown config section [{name}]")
        current = getattr(cfg, name)
        updates[name] = _build_section(type(current), name, dict(parser.items(name)), current, root)
    return dataclasses.replace(cfg, **updates)


def load_config(path: Optional[PathLike] = None) -> Config:
    if path is None:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), root=p.resolve().parent)


def dump_config(cfg: Config) -> str:
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_format(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def toy_config(corpus_dir: PathLike, workdir: PathLike = "run") -> Config:
    """Desk-scale settings matched to the synthetic 8 kHz, 1 s corpus."""
    corpus = Path(corpus_dir)
    small = dict(blocks_per_stage=(1, 1, 1, 1), strides=(2, 2, 2, 2))
    return Config(
        features=FeatureConfig(sample_rate=8000, n_fft=256),
        teacher=ModelConfig(channels=(8, 16, 32, 64), **small),
        student=ModelConfig(channels=(4, 8, 16, 32), **small),
        optim=OptimConfig(lr0=3e-3),
        pretrain=PretrainConfig(epochs=20, utts_per_condition=4, steps_per_epoch=2),
        finetune=FinetuneConfig(epochs=20, batch_size=32, aeg="static"),
        aeg=AegConfig(amplitude_unit=1.0 / 32768),
        augment=AugmentConfig(noise_dir=str(corpus / "noise"), rir_dir=str(corpus / "rir"),
                              snr_low=10.0, snr_high=30.0),
        data=DataConfig(protocol=str(corpus / "protocol.txt"), wav_dir=str(corpus / "wav"),
                        segment_s=1.0),
        run=RunConfig(workdir=str(workdir)),
    )
