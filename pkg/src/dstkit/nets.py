"""Generator, gated residual substitute, and small target networks."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import Module, Tensor, ops
from .core.tensor import ShapeError
from .gates import DynamicGate, GatedResidualBlock, GateMode, GateTrace

INIT_STD = 0.02


# -- layers -------------------------------------------------------------

class Dense(Module):
    def __init__(self, n_in: int, n_out: int) -> None:
        self.weight = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError("dense", x.shape, self.weight.shape)
        return ops.bias_add(ops.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: Optional[int] = None) -> None:
        self.weight = Tensor(np.zeros((c_out, c_in, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.bias_add(ops.conv2d(x, self.weight, self.stride, self.padding), self.bias)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ``±bound*std``."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_params(net: Module, seed: int, std: float = INIT_STD) -> Module:
    """Weights from a ±2σ truncated normal(0, std); biases zero, gains one."""
    rng = np.random.default_rng(seed % (1 << 64))
    for name, p in net.named_parameters().items():
        if name.endswith("bias"):
            p.data = np.zeros_like(p.data)
        elif name.endswith("gain"):
            p.data = np.ones_like(p.data)
        else:
            p.data = truncated_normal(rng, p.shape, std)
    return net


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def batch_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the batch (and spatial axes for N×C×H×W); no running stats."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    centred = ops.sub(x, ops.mean(x, axis=axes, keepdims=True))
    var = ops.mean(ops.mul(centred, centred), axis=axes, keepdims=True)
    return ops.div(centred, ops.power(ops.add(var, eps), 0.5))


# -- generator ----------------------------------------------------------

class GeneratorNet(Module):
    """Noise -> sample in [0, 1].

    ``out_shape`` is ``(c, h, w)`` for images (dense, reshape, two
    upsample+conv+ReLU blocks, 1×1 conv, sigmoid) or ``(d,)`` for vector data
    (three dense layers, sigmoid). Hidden layers are batch-normalized, and
    the pre-sigmoid output gets a normalization with a learned per-channel
    gain and shift, so the small initial weights cannot collapse all samples
    onto one point.
    """

    def __init__(self, noise_dim: int, out_shape: Sequence[int], base_channels: int = 128, hidden: int = 64) -> None:
        self.noise_dim = int(noise_dim)
        self.out_shape = tuple(int(s) for s in out_shape)
        if len(self.out_shape) == 3:
            c, h, w = self.out_shape
            if h % 4 or w % 4:
                raise ValueError(f"image generator needs h, w divisible by 4, got {h}x{w}")
            self._grid = (base_channels, h // 4, w // 4)
            self.fc = Dense(self.noise_dim, base_channels * (h // 4) * (w // 4))
            self.up1 = Conv2d(base_channels, base_channels // 2, 3)
            self.up2 = Conv2d(base_channels // 2, base_channels // 4, 3)
            self.to_image = Conv2d(base_channels // 4, c, 1)
            self.out_gain = Tensor(np.ones((1, c, 1, 1)), requires_grad=True)
            self.out_bias = Tensor(np.zeros((1, c, 1, 1)), requires_grad=True)
        elif len(self.out_shape) == 1:
            self.fc1 = Dense(self.noise_dim, hidden)
            self.fc2 = Dense(hidden, hidden)
            self.out = Dense(hidden, self.out_shape[0])
            self.out_gain = Tensor(np.ones((1, self.out_shape[0])), requires_grad=True)
            self.out_bias = Tensor(np.zeros((1, self.out_shape[0])), requires_grad=True)
        else:
            raise ValueError(f"unsupported generator output shape {self.out_shape}")

    def forward(self, z) -> Tensor:
        z = _as_input(z)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ShapeError("generator noise", z.shape, (None, self.noise_dim))
        if len(self.out_shape) == 1:
            h = ops.relu(batch_norm(self.fc1(z)))
            h = ops.relu(batch_norm(self.fc2(h)))
            pre = self.out(h)
        else:
            h = ops.relu(batch_norm(self.fc(z)))
            h = ops.reshape(h, (z.shape[0],) + self._grid)
            h = ops.relu(batch_norm(self.up1(ops.upsample_nearest(h, 2))))
            h = ops.relu(batch_norm(self.up2(ops.upsample_nearest(h, 2))))
            pre = self.to_image(h)
        return ops.sigmoid(ops.add(ops.mul(batch_norm(pre), self.out_gain), self.out_bias))


def generate(gen: GeneratorNet, z) -> Tensor:
    return gen(z)


# -- substitute ---------------------------------------------------------

def _make_block(kind: str, c_in: int, c_out: int, k: float) -> GatedResidualBlock:
    if kind == "conv":
        stride = 2 if c_in != c_out else 1
        branch = [Conv2d(c_in, c_out, 3, stride), Conv2d(c_out, c_out, 3, 1)]
        shortcut = None if (c_in == c_out and stride == 1) else Conv2d(c_in, c_out, 1, stride, 0)
    else:
        branch = [Dense(c_in, c_out), Dense(c_out, c_out)]
        shortcut = None if c_in == c_out else Dense(c_in, c_out)
    return GatedResidualBlock(branch, shortcut, DynamicGate(c_in, k))


class SubstituteNet(Module):
    """Stem, gated residual blocks, pooled linear head emitting class logits.

    ``in_shape`` of length 3 selects convolutional blocks, length 1 dense ones.
    """

    def __init__(self, in_shape: Sequence[int], class_count: int, widths: Sequence[int] = (16, 16, 32, 32), k: float = 1.0) -> None:
        self.in_shape = tuple(int(s) for s in in_shape)
        self.class_count = int(class_count)
        self.kind = "conv" if len(self.in_shape) == 3 else "dense"
        widths = [int(w) for w in widths]
        self.widths = tuple(widths)
        if not widths:
            raise ValueError("substitute needs at least one block")
        self.stem = Conv2d(self.in_shape[0], widths[0], 3) if self.kind == "conv" else Dense(self.in_shape[0], widths[0])
        self.blocks = [_make_block(self.kind, c_in, c_out, k) for c_in, c_out in zip([widths[0]] + widths[:-1], widths)]
        self.head = Dense(widths[-1], self.class_count)

    @property
    def gates(self) -> list[DynamicGate]:
        return [b.gate for b in self.blocks]

    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError("substitute input", x.shape, (None,) + self.in_shape)

    def _block_mode(self, gate_mode: GateMode, i: int):
        if isinstance(gate_mode, str):
            return gate_mode
        pattern = np.asarray(gate_mode, dtype=np.int64)
        return pattern[i] if pattern.ndim == 1 else pattern[:, i]

    def features(self, x, gate_mode: GateMode = "learned") -> tuple[Tensor, GateTrace]:
        """Penultimate (pooled) activations and the gate trace."""
        x = _as_input(x)
        self._check_input(x)
        h = ops.relu(self.stem(x))
        softs, decs = [], []
        for i, block in enumerate(self.blocks):
            h, soft, dec = block(h, self._block_mode(gate_mode, i))
            softs.append(soft)
            decs.append(dec)
        return ops.global_avg_pool(h), GateTrace.from_columns(softs, decs)

    def forward(self, x, gate_mode: GateMode = "learned") -> tuple[Tensor, GateTrace]:
        feats, trace = self.features(x, gate_mode)
        return self.head(feats), trace


def substitute_forward(sub: SubstituteNet, x, gate_mode: GateMode = "learned") -> tuple[Tensor, GateTrace]:
    return sub(x, gate_mode)


# -- targets ------------------------------------------------------------

class TargetMLP(Module):
    def __init__(self, in_dim: int, class_count: int, hidden: Sequence[int] = (64, 64)) -> None:
        dims = [int(in_dim)] + [int(h) for h in hidden] + [int(class_count)]
        self.layers = [Dense(a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.in_shape = (int(in_dim),)
        self.class_count = int(class_count)

    def forward(self, x) -> Tensor:
        h = _as_input(x)
        if h.ndim > 2:
            h = ops.flatten(h)
        for layer in self.layers[:-1]:
            h = ops.relu(layer(h))
        return self.layers[-1](h)


class LeNet(Module):
    """conv-relu-pool ×2 then three dense layers; needs h, w divisible by 4."""

    def __init__(self, in_shape: Sequence[int], class_count: int) -> None:
        c, h, w = (int(s) for s in in_shape)
        if h % 4 or w % 4:
            raise ValueError(f"LeNet needs h, w divisible by 4, got {h}x{w}")
        self.in_shape = (c, h, w)
        self.class_count = int(class_count)
        self.conv1 = Conv2d(c, 6, 3)
        self.conv2 = Conv2d(6, 16, 3)
        self.fc1 = Dense(16 * (h // 4) * (w // 4), 120)
        self.fc2 = Dense(120, 84)
        self.fc3 = Dense(84, self.class_count)

    def forward(self, x) -> Tensor:
        h = _as_input(x)
        h = ops.avg_pool2d(ops.relu(self.conv1(h)), 2)
        h = ops.avg_pool2d(ops.relu(self.conv2(h)), 2)
        h = ops.flatten(h)
        h = ops.relu(self.fc1(h))
        h = ops.relu(self.fc2(h))
        return self.fc3(h)


def build_target(arch: str, in_shape: Sequence[int], class_count: int, hidden: Sequence[int] = (64, 64)) -> Module:
    if arch == "mlp":
        return TargetMLP(int(np.prod(in_shape)), class_count, hidden)
    if arch == "lenet":
        return LeNet(in_shape, class_count)
    raise ValueError(f"unknown target architecture {arch!r}")


def train_classifier(model: Module, x: np.ndarray, y: np.ndarray, epochs: int = 30, lr: float = 1e-2, batch_size: int = 64, seed: int = 0) -> list[float]:
    """Plain cross-entropy training with Adam; returns per-epoch mean loss."""
    from .core import Adam, backward

    rng = np.random.default_rng(seed)
    init_params(model, seed)
    opt = Adam(model.parameters(), lr)
    onehot = np.eye(model.class_count)[y]
    history = []
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        losses = []
        for start in range(0, order.size, batch_size):
            idx = order[start:start + batch_size]
            logp = ops.log_softmax(model(Tensor(x[idx])), axis=-1)
            loss = ops.neg(ops.mean(ops.sum(ops.mul(logp, onehot[idx]), axis=-1)))
            opt.step(backward(loss))
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


def accuracy(model: Module, x: np.ndarray, y: np.ndarray) -> float:
    out = model(Tensor(x))
    logits = out[0] if isinstance(out, tuple) else out
    return float(np.mean(np.argmax(logits.data, axis=1) == y))
