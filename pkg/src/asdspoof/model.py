"""ResNetSE backbone: residual squeeze-excitation blocks with self-attentive pooling."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, DimensionError, FormatError
from .tensor import Parameter, Tensor

CHECKPOINT_VERSION = 1

TEACHER_CHANNELS = (32, 64, 128, 256)
STUDENT_CHANNELS = (16, 32, 64, 128)


@dataclass(frozen=True)
class ModelConfig:
    channels: Tuple[int, ...] = TEACHER_CHANNELS
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    strides: Tuple[int, ...] = (1, 2, 2, 2)
    se_reduction: int = 8
    embedding_dim: Optional[int] = None
    n_classes: int = 7
    input_mels: int = 40

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.embedding_dim is None:
            object.__setattr__(self, "embedding_dim", self.channels[-1])
        if not (len(self.channels) == len(self.blocks_per_stage) == len(self.strides)):
            raise ConfigurationError("channels, blocks_per_stage and strides need equal lengths")
        values = self.channels + self.blocks_per_stage + self.strides + (
            self.se_reduction, self.embedding_dim, self.n_classes, self.input_mels)
        if min(values) <= 0:
            raise ConfigurationError(f"all model settings must be positive: {self}")

    def with_classes(self, n_classes: int) -> "ModelConfig":
        return replace(self, n_classes=n_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def se_bottleneck(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Minimal container tracking parameters, buffers and train/eval mode."""

    def __init__(self):
        self.training = True
        self._buffers: Dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out = []
        for name, value in self._children():
            if isinstance(value, Parameter):
                out.append((prefix + name, value))
            else:
                out.extend(value.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + k, v) for k, v in self._buffers.items()]
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(prefix + name + "."))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigurationError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, bias=False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_kaiming(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class SEBlock(Module):
    """Squeeze-excitation: pooled channel statistics gate each channel."""

    def __init__(self, channels: int, reduction: int = 8, rng=None):
        super().__init__()
        hidden = se_bottleneck(channels, reduction)
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)
        # squeezed batch-normalised maps are near zero-mean; a negative random
        # bias on a narrow bottleneck would start the gate dead
        self.fc1.bias.data[...] = 0.0

    def gate(self, x) -> Tensor:
        squeezed = T.reduce(x, "mean", (2, 3))
        return T.sigmoid(self.fc2(T.relu(self.fc1(squeezed))))

    def forward(self, x, gate=None):
        """Rescale channels of ``x`` (``[B, C, H, W]``); ``gate`` overrides the learned excitation."""
        x = T.as_tensor(x)
        g = self.gate(x) if gate is None else T.as_tensor(gate)
        if g.ndim == 1:
            g = T.reshape(g, (1, -1))
        return x * T.reshape(g, g.shape + (1, 1))


class ResBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN-SE plus shortcut, followed by ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, reduction: int = 8, rng=None):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, reduction, rng=rng)
        if stride != 1 or in_ch != out_ch:
            self.shortcut_conv = Conv2d(in_ch, out_ch, 1, stride, 0, rng=rng)
            self.shortcut_bn = BatchNorm2d(out_ch)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def shortcut(self, x):
        if self.shortcut_conv is None:
            return T.as_tensor(x)
        return self.shortcut_bn(self.shortcut_conv(x))

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return T.relu(out + self.shortcut(x))


class SelfAttentivePool(Module):
    """Attention-weighted average over time of ``[B, C, T]`` frames."""

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.attention = Linear(channels, channels, rng=rng)
        self.context = Parameter((rng or np.random.default_rng(0)).normal(0.0, 0.1, (channels, 1)))

    def forward(self, h):
        h = T.as_tensor(h)
        frames = T.transpose(h, (0, 2, 1))                        # B, T, C
        scores = T.matmul(T.tanh(self.attention(frames)), self.context)  # B, T, 1
        weights = T.softmax(scores, axis=1)
        return T.reduce(frames * weights, "sum", 1)                # B, C


class ResNetSE(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.channels
        self.stem = Conv2d(1, c[0], 3, 1, 1, rng=rng)
        self.stem_bn = BatchNorm2d(c[0])
        blocks = []
        in_ch = c[0]
        for width, n_blocks, stride in zip(c, config.blocks_per_stage, config.strides):
            for i in range(n_blocks):
                blocks.append(ResBlock(in_ch, width, stride if i == 0 else 1,
                                       config.se_reduction, rng=rng))
                in_ch = width
        self.blocks = blocks
        self.pool = SelfAttentivePool(c[-1], rng=rng)
        self.embed = Linear(c[-1], config.embedding_dim, rng=rng)
        self.classifier = Linear(config.embedding_dim, config.n_classes, rng=rng)
        self._name_parameters()

    def _name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    @property
    def min_frames(self) -> int:
        return minimum_frames(self.config)

    def reset_classifier(self, n_classes: int, seed: int = 0) -> None:
        self.config = self.config.with_classes(n_classes)
        self.classifier = Linear(self.config.embedding_dim, n_classes,
                                 rng=np.random.default_rng(seed))
        self._name_parameters()

    def _check_input(self, features) -> Tensor:
        x = T.as_tensor(features)
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.input_mels:
            raise DimensionError(
                f"features must be [B, 1, {self.config.input_mels}, T], got {x.shape}")
        if x.shape[3] < self.min_frames:
            raise DegenerateInputError(
                f"input has {x.shape[3]} frames; the network needs at least T={self.min_frames}")
        return x

    def embedding(self, features) -> Tensor:
        x = self._check_input(features)
        x = T.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            x = block(x)
        h = T.reduce(x, "mean", 2)            # collapse frequency: B, C, T'
        return self.embed(self.pool(h))

    def forward(self, features) -> Tuple[Tensor, Tensor]:
        emb = self.embedding(features)
        return emb, self.classifier(emb)


def freeze(model: ResNetSE) -> ResNetSE:
    """Independent eval-mode copy whose parameters are constants (safe to share)."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad = False
        p.grad = None
    return frozen.eval()


def minimum_frames(config: ModelConfig) -> int:
    """Smallest input length for which every convolution has a valid output."""
    t = 1
    while True:
        ok = True
        length = t
        for stride in config.strides:
            if 3 > length + 2:
                ok = False
                break
            length = (length + 2 - 3) // stride + 1
        if ok and length >= 1:
            return t
        t += 1


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------

@dataclass
class SizeReport:
    params: int
    macs: int
    layers: List[Tuple[str, int, int]] = field(default_factory=list)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def count_params_macs(config: ModelConfig, input_frames: int) -> SizeReport:
    """Exact parameter count and multiply-accumulate count for one input of ``input_frames``.

    MACs cover convolutions (``O*C*kh*kw*H'*W'``) and linear layers; batch
    normalisation, activations and pooling are not counted.
    """
    rep = SizeReport(0, 0)

    def conv(name, cin, cout, k, s, p, h, w, bias=False):
        ho, wo = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        params = cout * cin * k * k + (cout if bias else 0)
        macs = cout * cin * k * k * ho * wo
        rep.layers.append((name, params, macs))
        return ho, wo

    def bn(name, ch):
        rep.layers.append((name, 2 * ch, 0))

    def lin(name, cin, cout, rows=1, bias=True):
        rep.layers.append((name, cin * cout + (cout if bias else 0), cin * cout * rows))

    c = config.channels
    h, w = config.input_mels, input_frames
    h, w = conv("stem", 1, c[0], 3, 1, 1, h, w)
    bn("stem_bn", c[0])
    in_ch = c[0]
    idx = 0
    for width, n_blocks, stride in zip(c, config.blocks_per_stage, config.strides):
        for i in range(n_blocks):
            s = stride if i == 0 else 1
            name = f"blocks.{idx}"
            h1, w1 = conv(name + ".conv1", in_ch, width, 3, s, 1, h, w)
            bn(name + ".bn1", width)
            conv(name + ".conv2", width, width, 3, 1, 1, h1, w1)
            bn(name + ".bn2", width)
            hidden = se_bottleneck(width, config.se_reduction)
            lin(name + ".se.fc1", width, hidden)
            lin(name + ".se.fc2", hidden, width)
            if s != 1 or in_ch != width:
                conv(name + ".shortcut_conv", in_ch, width, 1, s, 0, h, w)
                bn(name + ".shortcut_bn", width)
            h, w, in_ch = h1, w1, width
            idx += 1
    lin("pool.attention", c[-1], c[-1], rows=w)
    rep.layers.append(("pool.context", c[-1], c[-1] * w))
    lin("embed", c[-1], config.embedding_dim)
    lin("classifier", config.embedding_dim, config.n_classes)
    rep.params = sum(p for _, p, _ in rep.layers)
    rep.macs = sum(m for _, _, m in rep.layers)
    return rep


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_hash(model: Module) -> str:
    """SHA-256 over every parameter and buffer, in registration order."""
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path: Union[str, os.PathLike], model: ResNetSE,
                    features: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Write a self-describing ``.npz``: a JSON header plus flat little-endian float64 arrays."""
    state = model.state_dict()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "features": features or {},
        "meta": meta or {},
        "shapes": {k: list(v.shape) for k, v in state.items()},
    }
    arrays = {k: np.ascontiguousarray(v, dtype="<f8").reshape(-1) for k, v in state.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[ResNetSE, dict]:
    """Return the model (in eval mode) and the checkpoint header."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            flat = {k: z[k] for k in z.files if k != "__header__"}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: field 'format_version' = {version}, expected {CHECKPOINT_VERSION}")
    model = ResNetSE(ModelConfig.from_dict(header["model_config"]))
    shapes = header["shapes"]
    model.load_state_dict({k: v.astype(np.float64).reshape(shapes[k]) for k, v in flat.items()})
    model.eval()
    return model, header
