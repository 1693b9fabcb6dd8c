"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a closure mapping the output
gradient to input gradients. :func:`backward` walks the tape once in
reverse topological order. Only leaf tensors (parameters and inputs
created with ``requires_grad=True``) keep a ``.grad`` buffer; calling
``backward`` twice accumulates into those buffers.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, DomainError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, "max", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def _raise_item(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None) -> None:
    """Populate ``.grad`` of every leaf ancestor of a scalar ``loss``.

    With ``inputs`` only those leaves receive gradients; every other leaf's
    ``.grad`` is left untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no ancestor requires grad)")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    targets = None if inputs is None else {id(t) for t in inputs}
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if targets is not None and id(node) not in targets:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def power(a: ArrayLike, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: ArrayLike) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _record(out, (a,), fn)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside ``[lo, hi]``."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: ArrayLike, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), fn)


def concatenate(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    n = len(ts)
    return _record(np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(a: ArrayLike, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as accepted by :func:`numpy.pad`."""
    a = as_tensor(a)
    pw = np.broadcast_to(np.asarray(pad_width, dtype=int), (a.ndim, 2)) \
        if np.ndim(pad_width) < 2 else np.asarray(pad_width, dtype=int)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.shape))
    return _record(np.pad(a.data, pw), (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(x: ArrayLike, op: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when ``None``)."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if any(x.shape[ax] == 0 for ax in axes) or (not axes and x.size == 0):
        raise DomainError(f"empty reduction over axes {axes} of shape {x.shape}")
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    shape = x.shape

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _record(out, (x,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))
    if op == "mean":
        count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _record(out, (x,),
                       lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),))
    if op == "max":
        # route the gradient to the first maximal element only
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = np.transpose(x.data, rest + axes)
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out_k = out.reshape(kept)
        out_data = out_k if keepdims else out_k.reshape(
            tuple(n for i, n in enumerate(shape) if i not in axes))

        def fn(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            gm = gf.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(rest + axes)),)

        return _record(out_data, (x,), fn)
    raise DomainError(f"unknown reduction {op!r}")


def logsumexp(x: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s

    def fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _record(out if keepdims else np.squeeze(out, axis=axis), (x,), fn)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along ``axis``."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DomainError("log_softmax over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _record(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _record(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def conv2d(x: ArrayLike, k: ArrayLike, bias: Optional[ArrayLike] = None,
           stride=1, padding=0) -> Tensor:
    """2-D cross-correlation (kernels are not flipped) with zero padding.

    ``x`` is ``[B, C, H, W]``, ``k`` is ``[O, C, kh, kw]``; output extent is
    ``floor((H + 2p - kh) / stride) + 1`` per spatial axis.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input and kernel, got {x.shape}, {k.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if C != Ck:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Ck}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # im2col: rows are output positions, columns are (C, kh, kw) taps
    cols = np.empty((B, Ho, Wo, C, kh, kw))
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw].transpose(0, 2, 3, 1)
    cols = cols.reshape(B * Ho * Wo, C * kh * kw)
    w2 = k.data.reshape(O, C * kh * kw)
    out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents: Tuple[Tensor, ...] = (x, k)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents = (x, k, bias)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gk = (g2.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record(np.ascontiguousarray(out), parents, fn)


# ---------------------------------------------------------------------------
# normalisation and similarity
# ---------------------------------------------------------------------------

def _standardize(x: Tensor, axes: Tuple[int, ...], eps: float, floor: bool):
    """Zero-mean / unit-variance over ``axes``.

    With ``floor=True`` the variance is floored at ``eps`` (so well-spread
    slices normalise to exactly unit variance); otherwise ``eps`` is added.
    """
    xd = x.data
    n = int(np.prod([xd.shape[a] for a in axes]))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    if floor:
        active = var > eps
        denom = np.where(active, var, eps)
    else:
        active = np.ones_like(var, dtype=bool)
        denom = var + eps
    inv = 1.0 / np.sqrt(denom)
    xhat = xc * inv

    def fn(g):
        gs = g.sum(axis=axes, keepdims=True)
        gxh = (g * xhat).sum(axis=axes, keepdims=True)
        # variance term only contributes where it is not floored
        gx = inv * (g - gs / n - np.where(active, xhat * gxh / n, 0.0))
        return (gx,)

    return _record(xhat, (x,), fn), mu, var


def instance_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise each ``(b, c)`` slice of a ``[B, C, T]`` tensor over time.

    The slice variance is floored at ``eps``, so a constant slice maps to zeros.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"instance_norm expects [B, C, T], got {x.shape}")
    if x.shape[2] < 2:
        raise DegenerateInputError(f"instance_norm needs T >= 2, got T={x.shape[2]}")
    out, _, _ = _standardize(x, (2,), eps, floor=True)
    return out


def batch_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over all axes but 1.

    In training mode the running statistics are updated in place.
    """
    x = as_tensor(x)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = tuple(x.shape[1] if i == 1 else 1 for i in range(x.ndim))
    if training:
        xhat, mu, var = _standardize(x, axes, eps, floor=False)
        n = x.size // x.shape[1]
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(bshape)) * scale.reshape(bshape)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def cosine_similarity(a: ArrayLike, b: ArrayLike, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """``dot(a, b) / max(|a| |b|, eps)`` along ``axis`` (broadcasting the rest).

    A floor rather than an additive eps keeps the result exactly scale invariant
    while a zero vector still gives 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] < 1:
        raise DomainError("cosine_similarity over an empty axis")
    dot = (a * b).sum(axis=axis)
    norms = sqrt((a * a).sum(axis=axis)) * sqrt((b * b).sum(axis=axis))
    small = norms.data < eps
    if np.any(small):
        norms = norms * (~small) + eps * small
    return dot / norms


def linear(x: ArrayLike, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else out + bias
