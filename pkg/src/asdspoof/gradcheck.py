"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4,
               n_coords: Optional[int] = None, seed: int = 0,
               scale_floor: float = 1e-6) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The error is measured normwise over the checked coordinates:
    ``max|g_tape - g_fd| / max(max|g_tape|, max|g_fd|, scale_floor)``. With ``n_coords``
    only a random subset of coordinates is probed (for long waveforms).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.requires_grad:
        backward(out)
    analytic_full = np.zeros_like(x0) if xt.grad is None else xt.grad

    flat = x0.reshape(-1)
    if n_coords is None or n_coords >= flat.size:
        coords = np.arange(flat.size)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, n_coords, replace=False))

    numeric = np.empty(len(coords))
    for i, c in enumerate(coords):
        xp = flat.copy()
        xp[c] += h
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        xm = flat.copy()
        xm[c] -= h
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        numeric[i] = (fp - fm) / (2 * h)

    analytic = analytic_full.reshape(-1)[coords]
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    rel = err / max(scale, scale_floor)
    return GradCheckReport(rel, rel <= tol, len(coords), analytic, numeric)
