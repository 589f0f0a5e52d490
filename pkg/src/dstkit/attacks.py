"""White-box attacks run on the substitute: FGSM, BIM, PGD (L∞) and C&W (L2).

Models are any callable returning logits, or ``(logits, trace)`` as the
substitute does. Nothing here touches the target oracle.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Tensor, backward, ops, save_arrays

METHODS = ("fgsm", "bim", "pgd", "cw")


@dataclass
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 0.3
    step_size: float = 0.01
    steps: int = 40
    targeted: bool = False
    target_class: Optional[int] = None
    cw_confidence: float = 0.0
    cw_search_steps: int = 9
    cw_lr: float = 0.01
    cw_iterations: int = 200
    cw_initial_const: float = 1e-2
    clamp: Optional[tuple[float, float]] = (0.0, 1.0)
    label_source: str = "substitute"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}; choose from {METHODS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.method in ("bim", "pgd") and self.epsilon > 0 and self.step_size > self.epsilon:
            raise ValueError(f"step_size {self.step_size} exceeds epsilon {self.epsilon}")
        if self.label_source not in ("substitute", "target"):
            raise ValueError(f"label_source must be 'substitute' or 'target', got {self.label_source!r}")
        if self.clamp is not None:
            self.clamp = (float(self.clamp[0]), float(self.clamp[1]))


@dataclass
class AdvBatch:
    original: np.ndarray
    adversarial: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    success: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.original.shape[0]

    def save(self, stem) -> None:
        """Binary dump ``<stem>.ckpt`` plus ``<stem>.json`` per-example stats."""
        stem = Path(stem)
        save_arrays(stem.with_suffix(".ckpt"), {"original": self.original, "adversarial": self.adversarial}, meta=self.meta)
        rows = [
            {"index": i, "l2": float(self.l2[i]), "linf": float(self.linf[i]),
             "pred_before": int(self.pred_before[i]), "pred_after": int(self.pred_after[i])}
            for i in range(len(self))
        ]
        stem.with_suffix(".json").write_text(json.dumps({"meta": self.meta, "examples": rows}, indent=1))


def logits_of(model, x) -> Tensor:
    out = model(x if isinstance(x, Tensor) else Tensor(x))
    return out[0] if isinstance(out, tuple) else out


def predict(model, x) -> np.ndarray:
    return np.argmax(logits_of(model, np.asarray(x, dtype=np.float64)).data, axis=1)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ce_input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of summed cross-entropy w.r.t. the input batch."""
    xt = Tensor(x, requires_grad=True)
    logits = logits_of(model, xt)
    picked = ops.mul(ops.log_softmax(logits, axis=-1), _onehot(labels, logits.shape[1]))
    loss = ops.neg(ops.sum(picked))
    grads = backward(loss)
    return grads.get(id(xt), np.zeros_like(x))


def _clip(x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    return x if cfg.clamp is None else np.clip(x, *cfg.clamp)


def _norms(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = delta.reshape(delta.shape[0], -1)
    return np.abs(flat).max(axis=1), np.sqrt((flat * flat).sum(axis=1))


def _finish(model, x, adv, cfg, pred_before, success=None) -> AdvBatch:
    linf, l2 = _norms(adv - x)
    return AdvBatch(x, adv, linf, l2, pred_before, predict(model, adv), success, {"method": cfg.method, "epsilon": cfg.epsilon})


def _signed_step(model, x_cur, labels, cfg: AttackConfig) -> np.ndarray:
    g = ce_input_gradient(model, x_cur, labels)
    direction = -np.sign(g) if cfg.targeted else np.sign(g)
    return direction


def fgsm(model, x, labels, cfg: AttackConfig) -> AdvBatch:
    """One signed-gradient step of size epsilon. ``labels`` are target classes when ``cfg.targeted``."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred_before = predict(model, x)
    direction = _signed_step(model, x, labels, cfg)
    if not direction.any():
        warnings.warn("fgsm: zero input gradient, adversarial example equals input", RuntimeWarning)
    adv = _clip(x + cfg.epsilon * direction, cfg)
    return _finish(model, x, adv, cfg, pred_before)


def _iterative(model, x, labels, cfg: AttackConfig, start: np.ndarray, record: Optional[list] = None) -> np.ndarray:
    if cfg.steps * cfg.step_size < cfg.epsilon:
        warnings.warn(f"{cfg.method}: steps*step_size < epsilon; the budget cannot be reached", RuntimeWarning)
    lo, hi = x - cfg.epsilon, x + cfg.epsilon
    cur = start
    for _ in range(cfg.steps):
        cur = cur + cfg.step_size * _signed_step(model, cur, labels, cfg)
        cur = _clip(np.clip(cur, lo, hi), cfg)
        if record is not None:
            record.append(cur.copy())
    return cur


def bim(model, x, labels, cfg: AttackConfig, record: Optional[list] = None) -> AdvBatch:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred_before = predict(model, x)
    adv = _iterative(model, x, labels, cfg, x.copy(), record)
    return _finish(model, x, adv, cfg, pred_before)


def pgd(model, x, labels, cfg: AttackConfig, rng: Optional[np.random.Generator] = None, record: Optional[list] = None) -> AdvBatch:
    """BIM from a uniform random start inside the epsilon ball."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(0) if rng is None else rng
    pred_before = predict(model, x)
    start = _clip(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), cfg)
    adv = _iterative(model, x, labels, cfg, start, record)
    return _finish(model, x, adv, cfg, pred_before)


def cw_l2(model, x, labels, cfg: AttackConfig) -> AdvBatch:
    """Carlini-Wagner L2 in tanh space with a per-example binary search on c.

    Returns, per example, the lowest-L2 successful iterate seen, or the
    original input when no iterate succeeds.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    lo_box, hi_box = cfg.clamp if cfg.clamp is not None else (0.0, 1.0)
    span = hi_box - lo_box
    pred_before = predict(model, x)
    k = logits_of(model, x[:1]).shape[1]
    onehot = _onehot(labels, k)
    kappa = cfg.cw_confidence

    unit = np.clip((x - lo_box) / span * 2.0 - 1.0, -1 + 1e-6, 1 - 1e-6)
    w_init = np.arctanh(unit)

    const = np.full(n, cfg.cw_initial_const)
    c_lo = np.zeros(n)
    c_hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    b1, b2, eps = 0.9, 0.999, 1e-8
    view = (n,) + (1,) * (x.ndim - 1)

    for _ in range(cfg.cw_search_steps):
        w = w_init.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        round_success = np.zeros(n, dtype=bool)
        for it in range(1, cfg.cw_iterations + 1):
            wt = Tensor(w, requires_grad=True)
            adv_t = ops.add(ops.mul(ops.add(ops.tanh(wt), 1.0), span / 2.0), lo_box)
            diff = ops.sub(adv_t, x)
            l2sq = ops.sum(ops.reshape(ops.mul(diff, diff), (n, -1)), axis=1)
            logits = logits_of(model, adv_t)
            real = ops.sum(ops.mul(logits, onehot), axis=1)
            other = ops.max(ops.sub(logits, onehot * 1e9), axis=1)
            margin = ops.sub(other, real) if cfg.targeted else ops.sub(real, other)
            f = ops.clamp(margin, lo=-kappa)
            loss = ops.sum(ops.add(l2sq, ops.mul(f, const)))

            # bookkeeping on the current iterate before stepping
            z = logits.data
            pred = np.argmax(z, axis=1)
            if cfg.targeted:
                ok = (pred == labels) & (margin.data <= -kappa)
            else:
                ok = (pred != labels) & (margin.data <= -kappa)
            cur_l2 = l2sq.data
            better = ok & (cur_l2 < best_l2)
            if better.any():
                best_l2[better] = cur_l2[better]
                best_adv[better] = adv_t.data[better]
            round_success |= ok

            g = backward(loss)[id(wt)]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - cfg.cw_lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps)

        c_hi = np.where(round_success, np.minimum(c_hi, const), c_hi)
        c_lo = np.where(round_success, c_lo, np.maximum(c_lo, const))
        const = np.where(np.isfinite(c_hi), (c_lo + c_hi) / 2.0, const * 10.0)

    success = np.isfinite(best_l2)
    adv = np.where(success.reshape(view), best_adv, x)
    return _finish(model, x, adv, cfg, pred_before, success)


def run_attack(model, x, labels, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvBatch:
    if cfg.method == "fgsm":
        return fgsm(model, x, labels, cfg)
    if cfg.method == "bim":
        return bim(model, x, labels, cfg)
    if cfg.method == "pgd":
        return pgd(model, x, labels, cfg, rng)
    return cw_l2(model, x, labels, cfg)


def perturbation_stats(batch: AdvBatch) -> tuple[float, float]:
    """Mean per-example (L2, L∞) perturbation."""
    if len(batch) == 0:
        raise ValueError("perturbation_stats of an empty batch")
    return float(batch.l2.mean()), float(batch.linf.mean())
