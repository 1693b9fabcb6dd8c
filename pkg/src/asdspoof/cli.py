"""Command-line driver: synth, pretrain, finetune, distill, attack, score, evaluate, info."""

from __future__ import annotations

import argparse
import datetime
import hashlib
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import aeg as aeg_mod
from .config import AEG_MODES, Config, dump_config, load_config, toy_config
from .data import (ADVERSARIAL, SynthSpec, load_clips, parse_protocol, same_speaker_pairs,
                   split_entries, write_corpus)
from .errors import ASDError, ConfigurationError, ContractError
from .metrics import evaluate, read_scores, write_scores
from .model import ResNetSE, count_params_macs, load_checkpoint, save_checkpoint
from .trainer import (TrainLog, distill_student, finetune_adversarial, pretrain_ge2e, score_clips,
                      segment_length, single_threaded)

CHECKPOINTS = {"pretrain": "pretrain.npz", "finetune": "teacher.npz", "distill": "student.npz"}


def git_blob_hash(path: Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class Run:
    """Resolved configuration plus the run log for one CLI invocation."""

    def __init__(self, args: argparse.Namespace):
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace("run", seed=args.seed)
        self.cfg: Config = cfg
        self.args = args
        self.workdir = Path(cfg.run.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.log = TrainLog(self.workdir / cfg.run.log_file)

    @property
    def seed(self) -> int:
        return self.cfg.run.seed

    def checkpoint(self, stage: str) -> Path:
        return self.workdir / CHECKPOINTS[stage]

    def record(self, inputs: Sequence[Path]) -> None:
        """Append the resolved config and content hashes of every input to the log."""
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        self.log.write(f"# run {self.args.command} at {stamp} argv={' '.join(sys.argv[1:])!r}")
        self.log.write(f"# config sha256={self.cfg.digest()}")
        for line in dump_config(self.cfg).splitlines():
            if line:
                self.log.write(f"#   {line}")
        for p in inputs:
            if p is not None and Path(p).is_file():
                self.log.write(f"# input {p} blob={git_blob_hash(Path(p))}")

    def splits(self) -> Dict[str, list]:
        """Train/dev/eval clips, resampled to the feature rate.

        With ``dev_protocol`` and ``eval_protocol`` set, ``protocol`` is used
        whole for training; otherwise one protocol is split by fractions.
        """
        d = self.cfg.data
        rate = self.cfg.features.sample_rate
        if not d.protocol or not d.wav_dir:
            raise ConfigurationError("[data] protocol and wav_dir must be set")
        if d.dev_protocol or d.eval_protocol:
            if not (d.dev_protocol and d.eval_protocol):
                raise ConfigurationError("[data] dev_protocol and eval_protocol must be set together")
            sources = {"train": (d.protocol, d.wav_dir),
                       "dev": (d.dev_protocol, d.dev_wav_dir or d.wav_dir),
                       "eval": (d.eval_protocol, d.eval_wav_dir or d.wav_dir)}
            return {k: load_clips(parse_protocol(p), w, rate) for k, (p, w) in sources.items()}
        parts = split_entries(parse_protocol(d.protocol), d.fractions)
        return {k: load_clips(v, d.wav_dir, rate) for k, v in parts.items()}

    def inputs(self, *extra) -> List[Path]:
        out = [Path(self.args.config)] if self.args.config else []
        d = self.cfg.data
        out.extend(Path(p) for p in (d.protocol, d.dev_protocol, d.eval_protocol) if p)
        return out + [Path(e) for e in extra if e is not None]


def _require(path: Path, stage: str, needed_by: str) -> tuple:
    if not path.is_file():
        raise ContractError(f"{needed_by} needs a {stage} checkpoint at {path}; "
                            f"run `asdspoof {stage}` first")
    model, header = load_checkpoint(path)
    found = header.get("meta", {}).get("stage")
    if found != stage:
        raise ContractError(f"{path} holds a {found!r} checkpoint, {needed_by} needs {stage!r}")
    return model, header


def _save(run: Run, stage: str, result, path: Optional[Path] = None) -> Path:
    path = path or run.checkpoint(stage)
    meta = result.meta()
    meta.update(seed=run.seed, config_sha256=run.cfg.digest())
    save_checkpoint(path, result.model, features=run.cfg.features.__dict__, meta=meta)
    print(f"{stage}: best epoch {result.best_epoch}, checkpoint {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    spec = SynthSpec(n_speakers=args.speakers, clips_per_condition=args.clips,
                     duration_s=args.duration, sample_rate=args.sample_rate,
                     seed=0 if args.seed is None else args.seed)
    write_corpus(out, spec)
    cfg = toy_config(out.resolve(), (out / "run").resolve())
    if args.config:
        cfg = load_config(args.config)
    (out / "toy.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"synth: corpus in {out}, config {out / 'toy.ini'}")
    return 0


def cmd_pretrain(args) -> int:
    run = Run(args)
    run.record(run.inputs())
    data = run.splits()
    model = ResNetSE(run.cfg.teacher, seed=run.seed)
    result = pretrain_ge2e(model, data["train"], run.cfg, run.seed, run.log)
    _save(run, "pretrain", result, args.out)
    return 0


def cmd_finetune(args) -> int:
    run = Run(args)
    init = Path(args.init) if args.init else run.checkpoint("pretrain")
    run.record(run.inputs(init))
    model, _ = _require(init, "pretrain", "finetune")
    data = run.splits()
    mode = args.aeg or run.cfg.finetune.aeg
    result = finetune_adversarial(model, data["train"], data["dev"], run.cfg, mode, run.seed, run.log)
    _save(run, "finetune", result, args.out)
    if args.sidecar and result.adv_samples:
        aeg_mod.write_sidecar(args.sidecar, result.adv_samples, run.cfg.aeg)
    return 0


def cmd_distill(args) -> int:
    run = Run(args)
    teacher_path = Path(args.teacher) if args.teacher else run.checkpoint("finetune")
    run.record(run.inputs(teacher_path))
    teacher, _ = _require(teacher_path, "finetune", "distill")
    data = run.splits()
    student_cfg = run.cfg.student.with_classes(teacher.config.n_classes)
    result = distill_student(teacher, student_cfg, data["train"], data["dev"], run.cfg,
                             run.seed, run.log)
    _save(run, "distill", result, args.out)
    return 0


def _model_path(run: Run, which: str) -> Path:
    if which in ("teacher", "student", "pretrain"):
        stage = {"teacher": "finetune", "student": "distill", "pretrain": "pretrain"}[which]
        path = run.checkpoint(stage)
        if not path.is_file():
            raise ContractError(f"no {which} checkpoint at {path}; run `asdspoof {stage}` first")
        return path
    path = Path(which)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return path


def cmd_attack(args) -> int:
    run = Run(args)
    path = _model_path(run, args.model)
    run.record(run.inputs(path, args.pairs))
    model, _ = load_checkpoint(path)
    clips = {c.utt_id: c for part in run.splits().values() for c in part}
    if args.pairs:
        pairs = []
        for line_no, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[0] not in clips or parts[1] not in clips:
                raise ConfigurationError(f"{args.pairs} line {line_no}: expected two known utt ids")
            pairs.append((clips[parts[0]], clips[parts[1]]))
    else:
        pairs = same_speaker_pairs(list(clips.values()))
        if not pairs:
            raise ConfigurationError("no same-speaker bona fide pairs in the corpus")
    accepted = []
    for a, b in pairs[: args.limit]:
        if a.speaker_id != b.speaker_id:
            raise ConfigurationError(f"{a.utt_id} and {b.utt_id} belong to different speakers")
        trace = aeg_mod.bim_attack(model, a.samples, b.samples, run.cfg.aeg, run.cfg.features)
        ok = run.cfg.aeg.accepts(trace.final_similarity)
        print(f"{a.utt_id} {b.utt_id} s0={trace.initial_similarity:.6f} "
              f"s={trace.final_similarity:.6f} {'accepted' if ok else 'rejected'}")
        if ok:
            accepted.append(aeg_mod.AdvSample(b.samples + trace.perturbation, b.sample_rate,
                                              (a.utt_id, b.utt_id), a.speaker_id,
                                              trace.initial_similarity, trace.final_similarity))
    out = Path(args.out) if args.out else run.workdir / "adversarial"
    aeg_mod.write_sidecar(out, accepted, run.cfg.aeg)
    print(f"attack: {len(accepted)} accepted, written to {out}")
    return 0


def cmd_score(args) -> int:
    run = Run(args)
    path = _model_path(run, args.model)
    run.record(run.inputs(path))
    model, _ = load_checkpoint(path)
    clips = run.splits()[args.split]
    records = score_clips(model, [c for c in clips if c.condition != ADVERSARIAL], run.cfg)
    out = Path(args.out) if args.out else run.workdir / f"scores_{Path(path).stem}_{args.split}.txt"
    write_scores(out, records)
    print(f"score: {len(records)} records written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    scores = read_scores(args.scores)
    print(evaluate(scores, cfg.metrics).format())
    return 0


def cmd_info(args) -> int:
    cfg = load_config(args.config)
    frames = cfg.features.n_frames(segment_length(cfg))
    t = count_params_macs(cfg.teacher, frames)
    s = count_params_macs(cfg.student, frames)
    print(f"input: {cfg.features.n_mels} mels x {frames} frames")
    print(f"{'model':<8} {'channels':<22} {'params':>12} {'MACs':>16}")
    print(f"{'teacher':<8} {str(cfg.teacher.channels):<22} {t.params:>12,} {t.macs:>16,}")
    print(f"{'student':<8} {str(cfg.student.channels):<22} {s.params:>12,} {s.macs:>16,}")
    print(f"params ratio: {s.params / t.params:.4f}")
    print(f"MACs ratio: {s.macs / t.macs:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="asdspoof", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=3)
    p.add_argument("--clips", type=int, default=10, help="clips per speaker and condition")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="GE2E pre-training")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="adversarial fine-tuning")
    p.add_argument("--aeg", choices=AEG_MODES)
    p.add_argument("--init", help="pretrain checkpoint (default: <workdir>/pretrain.npz)")
    p.add_argument("--sidecar", help="directory for the injected adversarial WAVs")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("distill", parents=[common], help="knowledge distillation into the student")
    p.add_argument("--teacher", help="teacher checkpoint (default: <workdir>/teacher.npz)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("attack", parents=[common], help="standalone BIM over same-speaker pairs")
    p.add_argument("--model", default="pretrain", help="pretrain, teacher, student or a path")
    p.add_argument("--pairs", help="file of 'utt1 utt2' lines (default: all same-speaker pairs)")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("score", parents=[common], help="write a CM score file")
    p.add_argument("--model", default="student", help="teacher, student or a checkpoint path")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common], help="EER and min t-DCF of a score file")
    p.add_argument("--scores", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("info", parents=[common], help="parameter and MAC counts")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # usage errors (2) and --help (0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = load_config(args.config).run.threads if args.command != "synth" else 1
        with single_threaded(threads):
            return args.func(args)
    except (ASDError, OSError) as exc:
        print(f"asdspoof {args.command}: error: {exc}", file=sys.stderr)
        return 1


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
