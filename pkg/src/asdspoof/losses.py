"""GE2E metric-learning loss, classification NLL and the distillation objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, DimensionError, DomainError
from .tensor import Parameter, Tensor

COS_EPS = 1e-8


@dataclass
class GE2EBatch:
    """Embeddings ``[N, M, D]``: M utterances from each of N spoofing conditions."""

    embeddings: Tensor

    def __post_init__(self):
        self.embeddings = T.as_tensor(self.embeddings)
        if self.embeddings.ndim != 3:
            raise DimensionError(f"GE2E batch must be [N, M, D], got {self.embeddings.shape}")
        if self.N < 2:
            raise DegenerateInputError(f"GE2E needs at least 2 conditions, got N={self.N}")
        if self.M < 2:
            raise DegenerateInputError(f"GE2E needs at least 2 utterances per condition, got M={self.M}")

    @property
    def N(self) -> int:
        return self.embeddings.shape[0]

    @property
    def M(self) -> int:
        return self.embeddings.shape[1]


class GE2EHead:
    """Learnable affine map ``w * cos + b`` applied to the similarity matrix."""

    def __init__(self, w: float = 10.0, b: float = -5.0, w_floor: float = 1e-6):
        self.w = Parameter(np.array([w]), name="ge2e.w")
        self.b = Parameter(np.array([b]), name="ge2e.b")
        self.w_floor = w_floor

    def parameters(self):
        return [self.w, self.b]

    def clamp(self) -> None:
        np.maximum(self.w.data, self.w_floor, out=self.w.data)


def centroids(batch: GE2EBatch, exclude: Optional[Tuple[int, int]] = None) -> Tensor:
    """Per-condition mean embeddings ``[N, D]``.

    With ``exclude=(n, m)`` the centroid of condition ``n`` omits utterance ``m``.
    """
    x = batch.embeddings
    full = T.reduce(x, "mean", 1)
    if exclude is None:
        return full
    n, m = exclude
    if batch.M < 2:
        raise DegenerateInputError("leave-one-out centroid needs M >= 2")
    keep = [i for i in range(batch.M) if i != m]
    loo = T.reduce(x[n][keep], "mean", 0)
    rows = [loo if k == n else full[k] for k in range(batch.N)]
    return T.stack(rows, 0)


def similarity_matrix(batch: GE2EBatch, head: GE2EHead, leave_one_out: bool = True) -> Tensor:
    """``S[n, m, k] = w * cos(x_nm, c_k) + b``.

    For ``k == n`` the centroid excludes ``x_nm`` itself when ``leave_one_out``.
    """
    x = batch.embeddings
    N, M, _ = x.shape
    total = T.reduce(x, "sum", 1, keepdims=True)             # N, 1, D
    full = total / M                                         # N, 1, D
    # cos against every full centroid: [N, M, 1, D] vs [1, 1, N, D]
    cos_all = T.cosine_similarity(T.reshape(x, (N, M, 1, -1)),
                                  T.reshape(full, (1, 1, N, -1)), COS_EPS)
    if leave_one_out:
        own = (total - x) / (M - 1)                          # N, M, D
        cos_own = T.cosine_similarity(x, own, COS_EPS)       # N, M
        mask = np.eye(N)[:, None, :]                         # N, 1, N
        cos_all = cos_all * (1.0 - mask) + T.reshape(cos_own, (N, M, 1)) * mask
    return cos_all * head.w + head.b


def ge2e_loss(batch: GE2EBatch, head: GE2EHead, leave_one_out: bool = True) -> Tensor:
    """Mean over utterances of ``-S[n,m,n] + logsumexp_k S[n,m,k]``."""
    S = similarity_matrix(batch, head, leave_one_out)
    N, M, _ = S.shape
    idx = np.arange(N)
    positive = S[idx, :, idx]                                # N, M
    return T.reduce(T.logsumexp(S, axis=2) - positive, "mean")


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ContractError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    return labels


def nll_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = T.as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, K], got {logits.shape}")
    B, K = logits.shape
    labels = _check_labels(labels, B, K)
    logp = T.log_softmax(logits, axis=1)
    return -T.reduce(logp[np.arange(B), labels], "mean")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kd_loss(student_logits, teacher_logits, labels, temperature: float = 5.0,
            gamma: float = 0.5) -> Tensor:
    """``gamma * T^2 * KL(p_teacher || p_student) + (1 - gamma) * NLL``.

    Both distributions are softened by ``temperature``; the teacher side is a
    constant, so no gradient reaches ``teacher_logits``.
    """
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    s = T.as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if s.shape != t.shape:
        raise DimensionError(f"student {s.shape} and teacher {t.shape} logits differ in shape")
    hard = nll_loss(s, labels)
    if gamma == 0.0:
        return hard
    log_pt = _log_softmax_np(t / temperature)
    log_ps = T.log_softmax(s / temperature, axis=1)
    kl = T.reduce(T.reduce((log_pt - log_ps) * np.exp(log_pt), "sum", 1), "mean")
    return kl * (gamma * temperature ** 2) + hard * (1.0 - gamma)
