"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .data import ADVERSARIAL, CONDITIONS
from .errors import DegenerateInputError, DimensionError, DomainError


def check_waveforms(X, min_length: Optional[int] = None) -> List[np.ndarray]:
    """Normalise ``X`` to a list of finite float64 1-d signals.

    Accepts a 2-d array ``[n_clips, n_samples]`` or a sequence of 1-d arrays
    (clips may then differ in length).
    """
    if isinstance(X, np.ndarray):
        if X.ndim == 1 and X.dtype != object:
            raise DimensionError("expected a batch of waveforms, got a single 1-d signal; "
                                 "wrap it as X[None, :]")
        if X.ndim not in (1, 2):
            raise DimensionError(f"waveform batch must be 2-d, got shape {X.shape}")
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 1:
            raise DimensionError(f"waveform {i} must be 1-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"waveform {i} contains non-finite samples")
        if min_length is not None and arr.size < min_length:
            raise DegenerateInputError(f"waveform {i} has {arr.size} samples, need >= {min_length}")
        out.append(arr)
    if not out:
        raise DegenerateInputError("no waveforms given")
    return out


def check_conditions(y, n: int) -> np.ndarray:
    """Map labels (condition names or indices) to condition names."""
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    known = CONDITIONS + (ADVERSARIAL,)
    if np.issubdtype(y.dtype, np.integer):
        if y.min() < 0 or y.max() >= len(CONDITIONS):
            raise DomainError(f"integer labels must lie in [0, {len(CONDITIONS)})")
        return np.array([CONDITIONS[i] for i in y], dtype=object)
    bad = sorted({str(v) for v in y} - set(known))
    if bad:
        raise DomainError(f"unknown condition labels {bad}; expected one of {known}")
    return y.astype(object)


def check_same_length(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise DimensionError(f"{what}: {len(a)} vs {len(b)} entries")
