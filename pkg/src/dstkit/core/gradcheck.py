"""Central-difference gradient checks for ops and whole networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .module import Module
from .tensor import Tensor, backward

# Denominator floor for the relative error. Central differences at h=1e-6
# carry ~1e-10 absolute rounding noise, so entries far below this floor are
# judged on absolute error instead of on noise.
SCALE_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), SCALE_FLOOR)
    return np.abs(analytic - numeric) / denom


@dataclass
class GroupCheck:
    name: str
    max_rel_error: float
    passed: bool
    status: str = "checked"  # or "straight-through"


@dataclass
class GradCheckReport:
    tolerance: float
    groups: list[GroupCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def by_name(self) -> dict[str, GroupCheck]:
        return {g.name: g for g in self.groups}

    def worst(self) -> float:
        checked = [g.max_rel_error for g in self.groups if g.status == "checked"]
        return max(checked, default=0.0)


def _scalarize(out, weights: Optional[np.ndarray]) -> Tensor:
    if isinstance(out, tuple):
        out = out[0]
    if out.size == 1:
        return ops.sum(out)
    return ops.sum(ops.mul(out, weights))


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(
    network: Module,
    x,
    tolerance: float = 1e-5,
    loss_fn: Optional[Callable] = None,
    step: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
    **forward_kwargs,
) -> GradCheckReport:
    """Compare backward() against central differences for every trainable
    parameter of ``network``.

    Parameters of straight-through modules (hard gates) are reported with
    status ``"straight-through"`` and not differentiated numerically. Frozen
    parameters are omitted. Numeric disagreement is reported, never raised.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    rng = np.random.default_rng(seed)
    params = network.parameters()
    exempt = network.straight_through_names()

    probe = network(x, **forward_kwargs)
    probe_out = probe[0] if isinstance(probe, tuple) else probe
    weights = rng.standard_normal(probe_out.shape) if loss_fn is None else None

    def loss_tensor() -> Tensor:
        out = network(x, **forward_kwargs)
        if loss_fn is not None:
            return loss_fn(out[0] if isinstance(out, tuple) else out)
        return _scalarize(out, weights)

    grads = backward(loss_tensor())
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        if name in exempt:
            report.groups.append(GroupCheck(name, float("nan"), True, "straight-through"))
            continue
        analytic = grads.get(id(p))
        if analytic is None:
            analytic = np.zeros_like(p.data)
        idx = None
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        numeric = numeric_gradient(lambda: float(loss_tensor().data), p.data, step, idx)
        if idx is None:
            err = relative_error(analytic, numeric)
        else:
            err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
        worst = float(err.max()) if err.size else 0.0
        report.groups.append(GroupCheck(name, worst, worst < tolerance))
    return report


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-6,
    seed: int = 0,
) -> list[float]:
    """Max relative error of ``fn``'s gradient w.r.t. each input array.

    Non-scalar outputs are contracted with fixed random weights first.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out0 = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(out0.shape) if out0.size != 1 else None

    def value() -> float:
        out = fn(*[Tensor(a) for a in arrays])
        return float(_scalarize(out, weights).data)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(_scalarize(fn(*leaves), weights))
    errors = []
    for leaf, arr in zip(leaves, arrays):
        analytic = grads.get(id(leaf), np.zeros_like(arr))
        numeric = numeric_gradient(value, arr, step)
        errors.append(float(relative_error(analytic, numeric).max()))
    return errors
