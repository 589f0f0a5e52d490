"""Graph-structured distillation loss.

Each batch of model outputs is read as a graph whose nodes are the B
probability vectors and whose edges are their pairwise Euclidean distances.
The discrepancy between the target's graph and the substitute's graph is

    alpha1 * sum_j KL(target_j || substitute_j) + alpha2 * mean((A_t - A_s)**2)

The substitute minimizes it; the generator minimizes its negation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Tensor, ops
from .core.tensor import ShapeError

PROB_TOL = 1e-9
LABEL_SMOOTHING = 0.1


class ProbabilityError(ValueError):
    pass


@dataclass(frozen=True)
class GsilWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("GSIL weights must be nonnegative")
        if self.alpha1 == 0 and self.alpha2 == 0:
            raise ValueError("GSIL weights cannot both be zero")


@dataclass
class OutputGraph:
    nodes: Tensor  # B×K probabilities
    adjacency: Tensor  # B×B distances

    @property
    def batch(self) -> int:
        return self.nodes.shape[0]


@dataclass
class LossParts:
    node: Tensor
    edge: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {"loss_node": float(self.node.data), "loss_edge": float(self.edge.data), "loss_total": float(self.total.data)}


def _check_probs(p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ProbabilityError(f"expected B×K probabilities, got shape {p.shape}")
    sums = p.sum(axis=1)
    for j, (row, s) in enumerate(zip(p, sums)):
        if (row < 0).any() or abs(s - 1.0) > PROB_TOL:
            raise ProbabilityError(f"row {j} is not a probability vector (sum={float(s):.6g}, min={float(row.min()):.6g})")


def build_graph(outputs) -> OutputGraph:
    nodes = outputs if isinstance(outputs, Tensor) else Tensor(outputs)
    _check_probs(nodes.data)
    return OutputGraph(nodes, ops.pairwise_distance(nodes))


def node_kl_rows(p_target, p_sub) -> Tensor:
    """Row-wise KL(target || substitute) with logs floored at 1e-12; shape (B,)."""
    p_t = p_target if isinstance(p_target, Tensor) else Tensor(p_target)
    p_s = p_sub if isinstance(p_sub, Tensor) else Tensor(p_sub)
    if p_t.shape != p_s.shape:
        raise ShapeError("node_kl", p_t.shape, p_s.shape)
    log_ratio = ops.sub(ops.log(p_t), ops.log(p_s))
    return ops.sum(ops.mul(p_t, log_ratio), axis=-1)


def node_kl(p_target, p_sub) -> float:
    """KL(target || substitute) for two probability vectors."""
    t = np.asarray(p_target.data if isinstance(p_target, Tensor) else p_target, dtype=np.float64)
    s = np.asarray(p_sub.data if isinstance(p_sub, Tensor) else p_sub, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError("node_kl", t.shape, s.shape)
    return float(node_kl_rows(t[None, :], s[None, :]).data[0])


def edge_mse(a_target, a_sub) -> Tensor:
    a_t = a_target if isinstance(a_target, Tensor) else Tensor(a_target)
    a_s = a_sub if isinstance(a_sub, Tensor) else Tensor(a_sub)
    if a_t.ndim != 2 or a_t.shape != a_s.shape or a_t.shape[0] != a_t.shape[1]:
        raise ShapeError("edge_mse", a_t.shape, a_s.shape)
    diff = ops.sub(a_t, a_s)
    return ops.mean(ops.mul(diff, diff))


def gsil_parts(graph_t: OutputGraph, graph_s: OutputGraph, w: GsilWeights = GsilWeights(), normalize_nodes: bool = False) -> LossParts:
    if graph_t.nodes.shape != graph_s.nodes.shape:
        raise ShapeError("gsil_loss", graph_t.nodes.shape, graph_s.nodes.shape)
    kl = ops.sum(node_kl_rows(graph_t.nodes, graph_s.nodes))
    if normalize_nodes:
        kl = ops.mul(kl, 1.0 / graph_t.batch)
    edge = edge_mse(graph_t.adjacency, graph_s.adjacency)
    total = ops.add(ops.mul(kl, w.alpha1), ops.mul(edge, w.alpha2))
    return LossParts(kl, edge, total)


def gsil_loss(graph_t: OutputGraph, graph_s: OutputGraph, w: GsilWeights = GsilWeights(), normalize_nodes: bool = False) -> Tensor:
    return gsil_parts(graph_t, graph_s, w, normalize_nodes).total


def smooth_labels(onehot: np.ndarray, smoothing: float = LABEL_SMOOTHING) -> np.ndarray:
    k = onehot.shape[-1]
    return (1.0 - smoothing) * onehot + smoothing / k


# -- training objectives ------------------------------------------------

LOSS_KINDS = ("gsil", "kl", "mse")


def distill_parts(target_out, sub_logits: Tensor, w: GsilWeights = GsilWeights(), kind: str = "gsil", normalize_nodes: bool = False) -> LossParts:
    """Substitute-side discrepancy between constant target probabilities and
    substitute logits (softmax applied here).

    ``kind="gsil"`` is the graph loss, ``"kl"`` keeps only the node term,
    ``"mse"`` is a plain squared error between probability vectors.
    """
    t = Tensor(target_out.data if isinstance(target_out, Tensor) else target_out)
    p_s = ops.softmax(sub_logits, axis=-1)
    if kind == "gsil":
        return gsil_parts(build_graph(t), OutputGraph(p_s, ops.pairwise_distance(p_s)), w, normalize_nodes)
    if kind == "kl":
        _check_probs(t.data)
        kl = ops.sum(node_kl_rows(t, p_s))
        if normalize_nodes:
            kl = ops.mul(kl, 1.0 / t.shape[0])
        zero = Tensor(0.0)
        return LossParts(kl, zero, ops.mul(kl, w.alpha1))
    if kind == "mse":
        if t.shape != p_s.shape:
            raise ShapeError("mse", t.shape, p_s.shape)
        diff = ops.sub(t, p_s)
        mse = ops.mean(ops.mul(diff, diff))
        return LossParts(mse, Tensor(0.0), mse)
    raise ValueError(f"unknown loss kind {kind!r}")


def substitute_loss(target_out, sub_logits: Tensor, w: GsilWeights = GsilWeights(), kind: str = "gsil", normalize_nodes: bool = False) -> Tensor:
    return distill_parts(target_out, sub_logits, w, kind, normalize_nodes).total


def generator_loss(target_out, sub_logits: Tensor, w: GsilWeights = GsilWeights(), kind: str = "gsil", normalize_nodes: bool = False) -> Tensor:
    return ops.neg(substitute_loss(target_out, sub_logits, w, kind, normalize_nodes))
