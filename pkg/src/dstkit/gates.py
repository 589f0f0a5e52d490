"""Dynamic gates that execute or skip residual branches per sample.

A gate pools its block's input feature, applies a scalar affine map and a
slope-``k`` hard sigmoid; the binary decision is ``soft >= 0.5``. Training
uses a straight-through estimator: forward sees the 0/1 decision, backward
sees the hard-sigmoid slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import Module, Tensor, ops
from .core.tensor import ShapeError

THRESHOLD = 0.5
GATE_MODES = ("learned", "force_keep_all", "force_skip_all")

GateMode = Union[str, Sequence[int], np.ndarray]


def hard_sigmoid(g: float, k: float = 1.0) -> float:
    return max(0.0, min(k * g + 0.5, 1.0))


class DynamicGate(Module):
    straight_through = True

    def __init__(self, channels: int, k: float = 1.0) -> None:
        if not k > 0:
            raise ValueError(f"gate slope k must be positive, got {k}")
        self.weight = Tensor(np.zeros((channels, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)
        self.k = float(k)

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def soft(self, f: Tensor) -> Tensor:
        """Per-row hard-sigmoid value, shape (N,)."""
        pooled = ops.global_avg_pool(f)
        if pooled.shape[1] != self.channels:
            raise ShapeError("gate", pooled.shape, self.weight.shape)
        pre = ops.add(ops.matmul(pooled, self.weight), self.bias)
        return ops.reshape(ops.hard_sigmoid(pre, self.k), (f.shape[0],))

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        soft = self.soft(f)
        return soft, ops.ste_binarize(soft, THRESHOLD)


def gate_decide(gate: DynamicGate, f) -> tuple[float, int]:
    """Decision for a single C×H×W (or length-C) feature."""
    arr = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if arr.shape[0] != gate.channels:
        raise ShapeError("gate_decide", arr.shape, gate.weight.shape)
    pooled = arr.reshape(arr.shape[0], -1).mean(axis=1)
    pre = float(pooled @ gate.weight.data[:, 0] + gate.bias.data[0])
    soft = hard_sigmoid(pre, gate.k)
    return soft, int(soft >= THRESHOLD)


@dataclass
class GateTrace:
    """Soft values and binary decisions, arrays of shape (rows, blocks)."""

    soft: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    decisions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))

    @classmethod
    def from_columns(cls, softs: list[np.ndarray], decisions: list[np.ndarray]) -> "GateTrace":
        if not softs:
            return cls()
        return cls(np.stack(softs, axis=1), np.stack(decisions, axis=1).astype(np.int64))

    @classmethod
    def concat(cls, traces: Sequence["GateTrace"]) -> "GateTrace":
        traces = [t for t in traces if t.decisions.size]
        if not traces:
            return cls()
        return cls(np.concatenate([t.soft for t in traces]), np.concatenate([t.decisions for t in traces]))

    @property
    def num_blocks(self) -> int:
        return self.decisions.shape[1] if self.decisions.ndim == 2 else 0

    def keep_frequency(self) -> np.ndarray:
        return self.decisions.mean(axis=0)

    def majority_pattern(self) -> np.ndarray:
        """Per-block keep/skip by majority vote over rows (ties keep)."""
        return (self.keep_frequency() >= 0.5).astype(np.int64)


def skip_rate(trace: GateTrace) -> float:
    if trace.decisions.size == 0:
        raise ValueError("skip_rate of an empty gate trace")
    return float(np.mean(1 - trace.decisions))


def format_rate(rate: float) -> str:
    """Percent with one decimal, e.g. 0.706 -> '70.6'."""
    return f"{100.0 * rate:.1f}"


def _row_view(decision: Tensor, like: Tensor) -> Tensor:
    return ops.reshape(decision, (like.shape[0],) + (1,) * (like.ndim - 1))


class GatedResidualBlock(Module):
    """``y = shortcut(x) + d * branch(x)`` with ``d`` from a :class:`DynamicGate` on ``x``."""

    def __init__(self, branch: Sequence[Module], shortcut: Optional[Module], gate: DynamicGate) -> None:
        self.branch = list(branch)
        self.shortcut = shortcut
        self.gate = gate

    def residual(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.branch:
            h = ops.relu(layer(h))
        return h

    def skip_path(self, x: Tensor) -> Tensor:
        return x if self.shortcut is None else self.shortcut(x)

    def forward(self, x: Tensor, mode: GateMode = "learned") -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Return ``(y, soft, decision)`` with per-row soft values and 0/1 decisions."""
        base = self.skip_path(x)
        n = x.shape[0]
        if isinstance(mode, str):
            if mode not in GATE_MODES:
                raise ValueError(f"unknown gate mode {mode!r}")
            if mode == "learned":
                soft, dec = self.gate(x)
                res = self.residual(x)
                if res.shape != base.shape:
                    raise ShapeError("gated block", res.shape, base.shape)
                y = ops.add(base, ops.mul(res, _row_view(dec, res)))
                return y, soft.data.copy(), dec.data.astype(np.int64)
            soft = self.gate.soft(Tensor(x.data)).data
            if mode == "force_skip_all":
                return base, soft, np.zeros(n, dtype=np.int64)
            res = self.residual(x)
            if res.shape != base.shape:
                raise ShapeError("gated block", res.shape, base.shape)
            return ops.add(base, res), soft, np.ones(n, dtype=np.int64)

        # replay: explicit per-row decisions
        dec = np.broadcast_to(np.asarray(mode, dtype=np.int64), (n,)).copy()
        soft = self.gate.soft(Tensor(x.data)).data
        if not dec.any():
            return base, soft, dec
        res = self.residual(x)
        if res.shape != base.shape:
            raise ShapeError("gated block", res.shape, base.shape)
        if dec.all():
            return ops.add(base, res), soft, dec
        mask = Tensor(dec.astype(np.float64))
        return ops.add(base, ops.mul(res, _row_view(mask, res))), soft, dec


def gated_block_forward(block: GatedResidualBlock, x: Tensor, mode: GateMode = "learned"):
    """Functional alias returning ``(y, (soft, decision))``."""
    y, soft, dec = block(x, mode)
    return y, (soft, dec)
