"""Attack success rates against the target, repeats, and run reports.

Every target query made here is charged to the ``eval`` phase: ``filter`` for
the pass that decides which examples enter the denominator, ``final`` for the
check on adversarial inputs. Crafting happens on the substitute alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .attacks import AttackConfig, AdvBatch, predict, run_attack
from .core import save_arrays
from .gates import format_rate
from .oracle import TargetOracle

MODES = ("non_target", "target")


class EvalError(RuntimeError):
    pass


class FingerprintMismatch(EvalError):
    pass


def fingerprint(config: dict) -> str:
    """Stable short hash of a resolved configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class EvalProtocol:
    mode: str = "non_target"
    attack: AttackConfig = field(default_factory=AttackConfig)
    target_class: Union[int, str, None] = None  # int or "round-robin"
    repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown eval mode {self.mode!r}")
        if (self.mode == "target") != (self.target_class is not None):
            raise ValueError("target_class must be set exactly when mode == 'target'")
        if isinstance(self.target_class, str) and self.target_class != "round-robin":
            raise ValueError(f"target_class must be an int or 'round-robin', got {self.target_class!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class RepeatResult:
    asr: float  # percent
    filtered: int
    successes: int
    mean_l2: float
    mean_linf: float
    per_class: dict[int, tuple[int, int]]  # true class -> (filtered, successes)


def _per_class(y: np.ndarray, success: np.ndarray) -> dict[int, tuple[int, int]]:
    return {int(c): (int((y == c).sum()), int(success[y == c].sum())) for c in np.unique(y)}


def _result(y: np.ndarray, success: np.ndarray, adv: AdvBatch) -> RepeatResult:
    return RepeatResult(100.0 * float(success.mean()), int(success.size), int(success.sum()),
                        float(adv.l2.mean()), float(adv.linf.mean()), _per_class(y, success))


def _craft(substitute, oracle: TargetOracle, x, labels, cfg: AttackConfig, rng) -> AdvBatch:
    before = oracle.ledger_snapshot()
    adv = run_attack(substitute, x, labels, cfg, rng)
    if oracle.ledger_snapshot().total != before.total:
        raise EvalError("attack crafting touched the target oracle")
    return adv


def _filter_answers(oracle: TargetOracle, x: np.ndarray) -> np.ndarray:
    return np.argmax(oracle.query(x, "eval", tag="filter"), axis=1)


def asr_non_target(substitute, oracle: TargetOracle, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> RepeatResult:
    """Untargeted ASR over the examples the target already classifies correctly."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    t_pred = _filter_answers(oracle, x)
    keep = t_pred == y
    if not keep.any():
        raise EvalError("no evaluation example is classified correctly by the target")
    xs, ys = x[keep], y[keep]
    # the filter answers equal the true labels on the kept set
    labels = predict(substitute, xs) if cfg.label_source == "substitute" else ys
    adv = _craft(substitute, oracle, xs, labels, cfg, rng)
    final = np.argmax(oracle.query(adv.adversarial, "eval", tag="final"), axis=1)
    return _result(ys, final != ys, adv)


def target_classes(n: int, num_classes: int, target_class: Union[int, str]) -> np.ndarray:
    if target_class == "round-robin":
        return np.arange(n) % num_classes
    c = int(target_class)
    if not 0 <= c < num_classes:
        raise ValueError(f"target_class {c} out of range for {num_classes} classes")
    return np.full(n, c)


def asr_target(substitute, oracle: TargetOracle, x, y, cfg: AttackConfig, target_class: Union[int, str], rng: Optional[np.random.Generator] = None) -> RepeatResult:
    """Targeted ASR over examples the target does not already assign to their goal class."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    goal = target_classes(x.shape[0], oracle.num_outputs, target_class)
    t_pred = _filter_answers(oracle, x)
    keep = t_pred != goal
    if not keep.any():
        raise EvalError("every evaluation example is already classified as its target class")
    targeted = AttackConfig(**{**asdict(cfg), "targeted": True})
    adv = _craft(substitute, oracle, x[keep], goal[keep], targeted, rng)
    final = np.argmax(oracle.query(adv.adversarial, "eval", tag="final"), axis=1)
    return _result(y[keep], final == goal[keep], adv)


def random_baseline(oracle: TargetOracle, x, y, epsilon: float, rng: np.random.Generator, clamp=(0.0, 1.0)) -> RepeatResult:
    """Untargeted ASR of random ±epsilon sign noise (a random corner of the L∞ ball)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    keep = _filter_answers(oracle, x) == y
    if not keep.any():
        raise EvalError("no evaluation example is classified correctly by the target")
    xs, ys = x[keep], y[keep]
    noisy = np.clip(xs + epsilon * rng.choice([-1.0, 1.0], size=xs.shape), *clamp)
    final = np.argmax(oracle.query(noisy, "eval", tag="final"), axis=1)
    delta = (noisy - xs).reshape(xs.shape[0], -1)
    fake = AdvBatch(xs, noisy, np.abs(delta).max(axis=1), np.sqrt((delta ** 2).sum(axis=1)), ys, final)
    return _result(ys, final != ys, fake)


def whitebox_asr(model, x, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> float:
    """Percent of inputs whose prediction by ``model`` itself flips under the attack."""
    x = np.asarray(x, dtype=np.float64)
    before = predict(model, x)
    adv = run_attack(model, x, before, cfg, rng)
    return 100.0 * float(np.mean(adv.pred_after != before))


@dataclass
class EvalSummary:
    asr_mean: float
    asr_std: float
    repeats: list[RepeatResult]
    mean_l2: float
    mean_linf: float
    per_class: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "asr_mean": self.asr_mean, "asr_std": self.asr_std,
            "mean_l2": self.mean_l2, "mean_linf": self.mean_linf,
            "asr_per_repeat": [r.asr for r in self.repeats],
            "per_class_asr": {str(k): v for k, v in self.per_class.items()},
        }


def summarize(results: list[RepeatResult]) -> EvalSummary:
    """Mean and population standard deviation over repeats."""
    asrs = np.array([r.asr for r in results])
    totals: dict[int, list[int]] = {}
    for r in results:
        for c, (n, s) in r.per_class.items():
            acc = totals.setdefault(c, [0, 0])
            acc[0] += n
            acc[1] += s
    per_class = {c: 100.0 * s / n for c, (n, s) in sorted(totals.items()) if n}
    return EvalSummary(float(asrs.mean()), float(asrs.std()), results,
                       float(np.mean([r.mean_l2 for r in results])), float(np.mean([r.mean_linf for r in results])), per_class)


def evaluate(substitute, oracle: TargetOracle, x, y, protocol: EvalProtocol) -> EvalSummary:
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(protocol.seed).spawn(protocol.repeats)]
    out = []
    for rng in rngs:
        if protocol.mode == "non_target":
            out.append(asr_non_target(substitute, oracle, x, y, protocol.attack, rng))
        else:
            out.append(asr_target(substitute, oracle, x, y, protocol.attack, protocol.target_class, rng))
    return summarize(out)


def evaluate_random(oracle: TargetOracle, x, y, epsilon: float, repeats: int = 10, seed: int = 0) -> EvalSummary:
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(repeats)]
    return summarize([random_baseline(oracle, x, y, epsilon, rng) for rng in rngs])


# -- reports --------------------------------------------------------------

@dataclass
class RunReport:
    fingerprint: str
    variant: str
    scenario: str
    attack: str
    mode: str
    epsilon: float
    repeats: int
    asr_mean: float
    asr_std: float
    mean_l2: float
    mean_linf: float
    skip_rate: float
    train_q: int
    test_q: int
    eval_q: int
    agreement: float
    random_asr_mean: Optional[float] = None
    asr_per_repeat: list[float] = field(default_factory=list)
    per_class_asr: dict[str, float] = field(default_factory=dict)

    @property
    def skip_rate_pct(self) -> str:
        return format_rate(self.skip_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_rate_pct"] = self.skip_rate_pct
        return d

    def flat(self) -> dict:
        """Scalar-only view; lists and maps become dotted keys."""
        d = self.to_dict()
        out = {k: v for k, v in d.items() if not isinstance(v, (list, dict))}
        for i, v in enumerate(d["asr_per_repeat"]):
            out[f"asr_per_repeat.{i}"] = v
        for c, v in d["per_class_asr"].items():
            out[f"per_class_asr.{c}"] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        row = self.flat()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def render_table(self) -> str:
        rows = [
            ("variant", self.variant), ("scenario", self.scenario),
            ("attack", f"{self.attack} ({self.mode}, eps={self.epsilon:g})"),
            ("ASR (%)", f"{self.asr_mean:.2f} ± {self.asr_std:.2f} over {self.repeats} repeats"),
        ]
        if self.random_asr_mean is not None:
            rows.append(("random-noise ASR (%)", f"{self.random_asr_mean:.2f}"))
        rows += [
            ("distance L2 / Linf", f"{self.mean_l2:.4f} / {self.mean_linf:.4f}"),
            ("probe agreement", f"{self.agreement:.4f}"),
            ("skip rate (%)", self.skip_rate_pct),
            ("Train-Q", str(self.train_q)), ("Test-Q", str(self.test_q) if self.test_q else "-"),
            ("eval queries", str(self.eval_q)), ("fingerprint", self.fingerprint),
        ]
        for c, v in sorted(self.per_class_asr.items(), key=lambda kv: int(kv[0])):
            rows.append((f"ASR class {c} (%)", f"{v:.2f}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


TEXT_FIELDS = ("fingerprint", "variant", "scenario", "attack", "mode", "skip_rate_pct")


def parse_csv_report(text: str) -> dict:
    """Inverse of :meth:`RunReport.to_csv` for consistency checks."""
    row = next(csv.DictReader(io.StringIO(text)))
    out = {}
    for k, v in row.items():
        if k in TEXT_FIELDS:
            out[k] = v
            continue
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def assemble_report(distill: dict, evaluation: dict) -> RunReport:
    """Join one distillation record and one evaluation record.

    Both must carry the same ``fingerprint``; a single-repeat evaluation is
    refused because ASRs are only meaningful as a mean over repeats.
    """
    if distill.get("fingerprint") != evaluation.get("fingerprint"):
        raise FingerprintMismatch(f"distill fingerprint {distill.get('fingerprint')!r} != eval fingerprint {evaluation.get('fingerprint')!r}")
    if int(evaluation["repeats"]) < 2:
        raise EvalError("report assembly needs at least 2 repeats")
    ledger = evaluation["ledger"]
    breakdown = ledger.get("breakdown", {})
    return RunReport(
        fingerprint=distill["fingerprint"],
        variant=distill["variant"],
        scenario=distill["scenario"],
        attack=evaluation["attack"],
        mode=evaluation["mode"],
        epsilon=float(evaluation["epsilon"]),
        repeats=int(evaluation["repeats"]),
        asr_mean=float(evaluation["asr_mean"]),
        asr_std=float(evaluation["asr_std"]),
        mean_l2=float(evaluation["mean_l2"]),
        mean_linf=float(evaluation["mean_linf"]),
        skip_rate=float(distill["skip_rate"]),
        train_q=int(ledger["train_q"]),
        test_q=int(breakdown.get("eval:craft", 0)),
        eval_q=int(ledger["eval_q"]),
        agreement=float(distill["best_agreement"]),
        random_asr_mean=evaluation.get("random_asr_mean"),
        asr_per_repeat=[float(a) for a in evaluation["asr_per_repeat"]],
        per_class_asr={str(k): float(v) for k, v in evaluation["per_class_asr"].items()},
    )


def dump_embeddings(substitute, generator, n: int, path, seed: int = 0, gate_mode="learned") -> None:
    """Penultimate substitute activations on ``n`` generated samples, for external plotting."""
    z = np.random.default_rng(seed).standard_normal((n, generator.noise_dim))
    x = generator(z).data
    feats, trace = substitute.features(x, gate_mode)
    logits = substitute.head(feats).data
    save_arrays(path, {"features": feats.data, "predictions": np.argmax(logits, axis=1).astype(np.int64),
                       "decisions": trace.decisions.astype(np.uint8)},
                meta={"kind": "embeddings", "samples": n, "seed": seed, "feature_dim": int(feats.shape[1])})
