"""EER and normalised minimum t-DCF from countermeasure score files.

Convention: a trial with score >= tau is accepted as bona fide, so
Pmiss(tau) = frac(bona fide < tau) and Pfa(tau) = frac(spoof >= tau).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .data import BONAFIDE, SPOOF
from .errors import ConfigurationError, DomainError, ParseError

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    key: str
    score: float

    def __post_init__(self):
        if self.key not in (BONAFIDE, SPOOF):
            raise DomainError(f"key must be bonafide or spoof, got {self.key!r}")
        if not math.isfinite(self.score):
            raise DomainError(f"score for {self.utt_id} is not finite")


@dataclass(frozen=True)
class TdcfCosts:
    """Tandem constants C0, C1, C2.

    The defaults are placeholders (C0=0, C1=C2=1 reduces t-DCF to Pmiss + Pfa);
    real values come from the ASV operating point.
    """

    C0: float = 0.0
    C1: float = 1.0
    C2: float = 1.0

    def __post_init__(self):
        if min(self.C0, self.C1, self.C2) < 0:
            raise ConfigurationError("t-DCF constants must be nonnegative")
        if self.C1 <= 0 and self.C2 <= 0:
            raise ConfigurationError("t-DCF needs C1 > 0 or C2 > 0")

    @property
    def denominator(self) -> float:
        return self.C0 + min(self.C1, self.C2)


def _split(scores) -> Tuple[np.ndarray, np.ndarray]:
    recs = list(scores)
    bona = np.array([r.score for r in recs if r.key == BONAFIDE], dtype=np.float64)
    spoof = np.array([r.score for r in recs if r.key == SPOOF], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise DomainError(f"need both classes, got {bona.size} bona fide and {spoof.size} spoof")
    return bona, spoof


def det_curve(bona: np.ndarray, spoof: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (ascending, with -inf/+inf sentinels), Pmiss and Pfa arrays."""
    taus = np.concatenate([[-np.inf], np.unique(np.concatenate([bona, spoof])), [np.inf]])
    bs = np.sort(bona)
    ss = np.sort(spoof)
    pmiss = np.searchsorted(bs, taus, side="left") / bs.size
    pfa = (ss.size - np.searchsorted(ss, taus, side="left")) / ss.size   # integer count, no 1 - x rounding
    return taus, pmiss, pfa


def det_points(scores: Iterable[ScoreRecord]) -> List[Tuple[float, float, float]]:
    taus, pmiss, pfa = det_curve(*_split(scores))
    return list(zip(taus.tolist(), pmiss.tolist(), pfa.tolist()))


def _eer(pmiss: np.ndarray, pfa: np.ndarray) -> float:
    diff = pmiss - pfa                       # nondecreasing, -1 at -inf, +1 at +inf
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return float(pmiss[i])
    # crossing lies between DET points i-1 and i
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return float(pmiss[i - 1] + w * (pmiss[i] - pmiss[i - 1]))


def eer(scores: Iterable[ScoreRecord]) -> float:
    """Equal error rate, linearly interpolated where Pmiss - Pfa changes sign."""
    _, pmiss, pfa = det_curve(*_split(scores))
    return _eer(pmiss, pfa)


def eer_from_arrays(bona, spoof) -> float:
    bona = np.asarray(bona, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise DomainError("need both classes")
    _, pmiss, pfa = det_curve(bona, spoof)
    return _eer(pmiss, pfa)


def min_tdcf(scores: Iterable[ScoreRecord], costs: TdcfCosts = TdcfCosts()) -> float:
    """``min_tau (C0 + C1 Pmiss + C2 Pfa) / (C0 + min(C1, C2))``."""
    if costs.denominator <= 0:
        raise ConfigurationError("t-DCF normalisation C0 + min(C1, C2) is zero")
    _, pmiss, pfa = det_curve(*_split(scores))
    return float(np.min(costs.C0 + costs.C1 * pmiss + costs.C2 * pfa) / costs.denominator)


def read_scores(path: PathLike) -> List[ScoreRecord]:
    """Parse ``utt_id key score`` lines; blank lines are skipped."""
    out: List[ScoreRecord] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", line_no)
            utt, key, raw = parts
            try:
                value = float(raw)
            except ValueError:
                raise ParseError(f"score {raw!r} is not a number", line_no) from None
            if utt in seen:
                raise ParseError(f"duplicate utt_id {utt}", line_no)
            try:
                out.append(ScoreRecord(utt, key, value))
            except DomainError as exc:
                raise ParseError(str(exc), line_no) from None
            seen.add(utt)
    return out


def write_scores(path: PathLike, records: Iterable[ScoreRecord]) -> None:
    # repr keeps 17 significant digits, so the round trip is exact
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.utt_id} {r.key} {r.score!r}\n")


@dataclass
class EvaluationReport:
    eer: float
    min_tdcf: float
    n_bonafide: int
    n_spoof: int
    n_thresholds: int
    costs: TdcfCosts

    def format(self) -> str:
        return "\n".join([
            f"EER: {100 * self.eer:.2f}%",
            f"min t-DCF: {self.min_tdcf:.4f}",
            f"bonafide: {self.n_bonafide}",
            f"spoof: {self.n_spoof}",
            f"thresholds swept: {self.n_thresholds}",
            f"costs: C0={self.costs.C0} C1={self.costs.C1} C2={self.costs.C2}",
        ])


def evaluate(scores: Sequence[ScoreRecord], costs: TdcfCosts = TdcfCosts()) -> EvaluationReport:
    bona, spoof = _split(scores)
    taus, pmiss, pfa = det_curve(bona, spoof)
    tdcf = float(np.min(costs.C0 + costs.C1 * pmiss + costs.C2 * pfa) / costs.denominator)
    return EvaluationReport(_eer(pmiss, pfa), tdcf, bona.size, spoof.size, taus.size, costs)
