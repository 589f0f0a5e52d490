"""Alternating substitute/generator distillation against a black-box oracle.

One iteration = one substitute update (minimize the discrepancy on a fresh
generated batch) followed by one generator update (maximize it). Only the
oracle's query interface is used; target outputs are constants in every
backward pass.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Adam, Tensor, backward, load_arrays, save_arrays
from .gates import GateTrace, format_rate, skip_rate
from .gsil import GsilWeights, LossParts, distill_parts, smooth_labels
from .nets import GeneratorNet, SubstituteNet, init_params
from .oracle import QueryLedger, TargetOracle

log = logging.getLogger(__name__)

VARIANTS = {
    # name: (loss kind, gate mode)
    "baseline-i": ("mse", "force_keep_all"),
    "baseline-ii": ("kl", "force_keep_all"),
    "gsil": ("gsil", "force_keep_all"),
    "dst": ("gsil", "learned"),
}

STEP_FIELDS = ("epoch", "step", "loss_node", "loss_edge", "loss_total", "gen_loss", "skip_rate", "train_q", "lr_sub", "lr_gen")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    steps_per_epoch: int = 100
    batch_size: int = 500
    lr_sub: float = 1e-3
    lr_gen: float = 1e-4
    decay_start_epoch: int = 80
    seed: int = 0
    alpha1: float = 1.0
    alpha2: float = 1.0
    normalize_nodes: bool = False
    variant: str = "dst"
    gate_k: float = 1.0
    reuse_query: bool = False
    noise_dim: int = 16
    probe_generated: int = 1024
    probe_uniform: int = 1024

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ValueError(f"decay_start_epoch ({self.decay_start_epoch}) must be in [0, epochs={self.epochs})")
        if self.lr_sub < 0 or self.lr_gen < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be positive")

    @property
    def loss_kind(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def gate_mode(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def weights(self) -> GsilWeights:
        return GsilWeights(self.alpha1, self.alpha2)

    @property
    def queries_per_iteration(self) -> int:
        return self.batch_size * (1 if self.reuse_query else 2)


def lr_at(base: float, epoch: int, epochs: int, decay_start: int) -> float:
    """Constant until ``decay_start``, then linear to zero at ``epochs``."""
    if epoch < decay_start:
        return base
    return base * (epochs - epoch) / (epochs - decay_start)


def agreement(sub: SubstituteNet, x: np.ndarray, target_labels: np.ndarray, gate_mode: str = "learned") -> tuple[float, GateTrace]:
    logits, trace = sub(Tensor(x), gate_mode)
    return float(np.mean(np.argmax(logits.data, axis=1) == target_labels)), trace


@dataclass
class DistillResult:
    initial_agreement: float
    final_agreement: float
    best_agreement: float
    best_epoch: int
    skip_rate: float
    ledger: QueryLedger
    keep_pattern: list[int] = field(default_factory=list)  # majority vote per block, 1 = keep
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "initial_agreement": self.initial_agreement,
            "final_agreement": self.final_agreement,
            "best_agreement": self.best_agreement,
            "best_epoch": self.best_epoch,
            "skip_rate": self.skip_rate,
            "skip_rate_pct": format_rate(self.skip_rate),
            "keep_pattern": list(self.keep_pattern),
            "train_q": self.ledger.train_queries,
            "eval_q": self.ledger.eval_queries,
        }


class Distiller:
    def __init__(self, cfg: TrainConfig, oracle: TargetOracle, generator: GeneratorNet, substitute: SubstituteNet, run_dir=None) -> None:
        if tuple(generator.out_shape) != oracle.input_shape:
            raise ValueError(f"generator emits {generator.out_shape}, target expects {oracle.input_shape}")
        if substitute.class_count != oracle.num_outputs:
            raise ValueError(f"substitute has {substitute.class_count} classes, target {oracle.num_outputs}")
        self.cfg = cfg
        self.oracle = oracle
        self.generator = generator
        self.substitute = substitute
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.opt_sub = Adam(substitute.parameters(), cfg.lr_sub)
        self.opt_gen = Adam(generator.parameters(), cfg.lr_gen)
        self.rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
        self.epoch = 0
        self.step_in_epoch = 0
        self.best_agreement = -1.0
        self.best_epoch = -1
        self.best_params = substitute.state_dict()
        self.initial_agreement: Optional[float] = None
        self.probe_x: Optional[np.ndarray] = None
        self.probe_labels: Optional[np.ndarray] = None
        self.last_batch: dict = {}
        self.epoch_records: list[dict] = []
        self.step_records: list[dict] = []

    # -- construction ---------------------------------------------------
    @classmethod
    def build(cls, cfg: TrainConfig, oracle: TargetOracle, widths=(16, 16, 32, 32), gen_hidden: int = 64, gen_channels: int = 32, run_dir=None) -> "Distiller":
        gen_seed, sub_seed, _ = np.random.SeedSequence(cfg.seed).spawn(3)
        gen = GeneratorNet(cfg.noise_dim, oracle.input_shape, base_channels=gen_channels, hidden=gen_hidden)
        sub = SubstituteNet(oracle.input_shape, oracle.num_outputs, widths, cfg.gate_k)
        init_params(gen, int(gen_seed.generate_state(1, np.uint64)[0]))
        init_params(sub, int(sub_seed.generate_state(1, np.uint64)[0]))
        return cls(cfg, oracle, gen, sub, run_dir)

    # -- steps ------------------------------------------------------------
    def _noise(self) -> np.ndarray:
        return self.rng.standard_normal((self.cfg.batch_size, self.cfg.noise_dim))

    def _target_view(self, t: np.ndarray) -> np.ndarray:
        return smooth_labels(t) if self.oracle.scenario == "label" else t

    def _loss(self, t: np.ndarray, logits: Tensor) -> LossParts:
        return distill_parts(t, logits, self.cfg.weights, self.cfg.loss_kind, self.cfg.normalize_nodes)

    def substitute_step(self) -> dict:
        z = self._noise()
        x = Tensor(self.generator(z).data)  # generator frozen for this step
        t = self._target_view(self.oracle.query(x.data, "train", tag="substitute"))
        try:
            logits, trace = self.substitute(x, self.cfg.gate_mode)
            parts = self._loss(t, logits)
            self._check_finite(parts)
            self.opt_sub.step(backward(parts.total))
        except FloatingPointError as exc:
            self._abort(exc, z, t)
        self.last_batch = {"z": z, "x": x.data, "t": t, "logits": logits.data}
        return {**parts.floats(), "skip_rate": skip_rate(trace)}

    def generator_step(self) -> dict:
        if self.cfg.reuse_query and self.last_batch:
            z, t = self.last_batch["z"], self.last_batch["t"]
        else:
            z = self._noise()
            t = None
        x = self.generator(z)
        if t is None:
            t = self._target_view(self.oracle.query(x.data, "train", tag="generator"))
        try:
            logits, _ = self.substitute(x, self.cfg.gate_mode)
            parts = self._loss(t, logits)
            self._check_finite(parts)
            loss = -parts.total
            self.opt_gen.step(backward(loss))
        except FloatingPointError as exc:
            self._abort(exc, z, t)
        return {"gen_loss": float(loss.data)}

    @staticmethod
    def _check_finite(parts: LossParts) -> None:
        if not np.isfinite(parts.total.data):
            raise FloatingPointError("loss is not finite")

    def _abort(self, exc: Exception, z, t) -> None:
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            save_arrays(self.run_dir / "diagnostic.ckpt", {"z": z, "t": t}, meta={"epoch": self.epoch, "error": str(exc)})
        raise TrainingError(f"non-finite loss at epoch {self.epoch} step {self.step_in_epoch}: {exc}") from exc

    # -- probe set --------------------------------------------------------
    def _make_probe(self) -> None:
        probe_rng = np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(7,)))
        z = probe_rng.standard_normal((self.cfg.probe_generated, self.cfg.noise_dim))
        gen_part = self.generator(z).data
        uni = probe_rng.uniform(0.0, 1.0, size=(self.cfg.probe_uniform,) + self.oracle.input_shape)
        self.probe_x = np.concatenate([gen_part, uni])
        answers = self.oracle.query(self.probe_x, "eval", tag="probe")
        self.probe_labels = np.argmax(answers, axis=1)

    def evaluate_probe(self) -> tuple[float, GateTrace]:
        return agreement(self.substitute, self.probe_x, self.probe_labels, self.cfg.gate_mode)

    # -- loop -------------------------------------------------------------
    def _set_lrs(self) -> None:
        c = self.cfg
        self.opt_sub.lr = lr_at(c.lr_sub, self.epoch, c.epochs, c.decay_start_epoch)
        self.opt_gen.lr = lr_at(c.lr_gen, self.epoch, c.epochs, c.decay_start_epoch)

    def _emit_step(self, rec: dict) -> None:
        self.step_records.append(rec)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")

    def _emit_epoch(self, rec: dict) -> None:
        self.epoch_records.append(rec)
        if self.run_dir is None:
            return
        path = self.run_dir / "epochs.csv"
        new = not path.exists()
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rec))
            if new:
                writer.writeheader()
            writer.writerow(rec)

    def run(self) -> DistillResult:
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        if self.probe_x is None:
            self._make_probe()
            self.initial_agreement, _ = self.evaluate_probe()
            log.info("initial probe agreement %.3f", self.initial_agreement)
        c = self.cfg
        while self.epoch < c.epochs:
            self._set_lrs()
            losses = []
            step_skips = []
            for s in range(c.steps_per_epoch):
                self.step_in_epoch = s
                rec = self.substitute_step()
                rec.update(self.generator_step())
                losses.append(rec["loss_total"])
                step_skips.append(rec["skip_rate"])
                self._emit_step({
                    "epoch": self.epoch, "step": s, "loss_node": rec["loss_node"], "loss_edge": rec["loss_edge"],
                    "loss_total": rec["loss_total"], "gen_loss": rec["gen_loss"], "skip_rate": rec["skip_rate"],
                    "train_q": self.oracle.ledger_snapshot().train_queries,
                    "lr_sub": self.opt_sub.lr, "lr_gen": self.opt_gen.lr,
                })
            agree, trace = self.evaluate_probe()
            rate = skip_rate(trace)
            if agree > self.best_agreement:
                self.best_agreement, self.best_epoch = agree, self.epoch
                self.best_params = self.substitute.state_dict()
            self._emit_epoch({
                "epoch": self.epoch, "agreement": agree, "skip_rate": rate,
                "keep_freq": ";".join(f"{f:.4f}" for f in trace.keep_frequency()),
                "mean_loss": float(np.mean(losses)), "mean_step_skip_rate": float(np.mean(step_skips)),
                "train_q": self.oracle.ledger_snapshot().train_queries,
            })
            log.info("epoch %d agreement %.3f skip %s%%", self.epoch, agree, format_rate(rate))
            self.epoch += 1
            if self.run_dir is not None:
                self.save_state(self.run_dir / "state.ckpt")
                self.save_substitute(self.run_dir / "substitute_best.ckpt", best=True)
        final_agree, trace = self.evaluate_probe()
        return DistillResult(
            initial_agreement=self.initial_agreement, final_agreement=final_agree,
            best_agreement=self.best_agreement, best_epoch=self.best_epoch,
            skip_rate=skip_rate(trace), ledger=self.oracle.ledger_snapshot(),
            keep_pattern=[int(v) for v in trace.majority_pattern()],
            epochs=list(self.epoch_records), steps=list(self.step_records),
        )

    def use_best(self) -> SubstituteNet:
        self.substitute.load_state_dict(self.best_params)
        return self.substitute

    # -- persistence ------------------------------------------------------
    def _state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for prefix, net, opt in (("gen", self.generator, self.opt_gen), ("sub", self.substitute, self.opt_sub)):
            for name, arr in net.state_dict().items():
                arrays[f"{prefix}.param.{name}"] = arr
            for name in opt.params:
                if name in opt.state.m:
                    arrays[f"{prefix}.adam_m.{name}"] = opt.state.m[name]
                    arrays[f"{prefix}.adam_v.{name}"] = opt.state.v[name]
        for name, arr in self.best_params.items():
            arrays[f"best.{name}"] = arr
        arrays["probe.x"] = self.probe_x
        arrays["probe.labels"] = self.probe_labels.astype(np.int64)
        return arrays

    def save_state(self, path) -> None:
        meta = {
            "kind": "run_state",
            "config": asdict(self.cfg),
            "epoch": self.epoch,
            "adam_steps": {"gen": self.opt_gen.state.step, "sub": self.opt_sub.state.step},
            "rng": self.rng.bit_generator.state,
            "ledger": self.oracle.ledger_snapshot().to_dict(),
            "best_agreement": self.best_agreement,
            "best_epoch": self.best_epoch,
            "initial_agreement": self.initial_agreement,
        }
        save_arrays(path, self._state_arrays(), meta)

    def load_state(self, path) -> None:
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "run_state":
            raise TrainingError(f"{path} is not a run state checkpoint")
        for prefix, net, opt in (("gen", self.generator, self.opt_gen), ("sub", self.substitute, self.opt_sub)):
            net.load_state_dict({k[len(prefix) + 7:]: v for k, v in arrays.items() if k.startswith(f"{prefix}.param.")})
            opt.state.m = {k[len(prefix) + 8:]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}.adam_m.")}
            opt.state.v = {k[len(prefix) + 8:]: v.copy() for k, v in arrays.items() if k.startswith(f"{prefix}.adam_v.")}
            opt.state.step = int(meta["adam_steps"][prefix])
        self.best_params = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
        self.probe_x = arrays["probe.x"]
        self.probe_labels = arrays["probe.labels"]
        self.rng.bit_generator.state = meta["rng"]
        self.oracle.restore_ledger(QueryLedger.from_dict(meta["ledger"]))
        self.epoch = int(meta["epoch"])
        self.best_agreement = float(meta["best_agreement"])
        self.best_epoch = int(meta["best_epoch"])
        self.initial_agreement = meta["initial_agreement"]
        if self.run_dir is not None:
            self._trim_logs()

    def _trim_logs(self) -> None:
        """Drop log rows written after the checkpoint (a crash mid-epoch) and reload the rest."""
        steps = self.run_dir / "metrics.jsonl"
        if steps.exists():
            rows = [json.loads(line) for line in steps.read_text(encoding="utf-8").splitlines() if line]
            self.step_records = [r for r in rows if r["epoch"] < self.epoch]
            steps.write_text("".join(json.dumps(r) + "\n" for r in self.step_records), encoding="utf-8")
        epochs = self.run_dir / "epochs.csv"
        if epochs.exists():
            with open(epochs, newline="", encoding="utf-8") as fh:
                rows = list(csv.DictReader(fh))
            kept = [r for r in rows if int(r["epoch"]) < self.epoch]
            if kept:
                with open(epochs, "w", newline="", encoding="utf-8") as fh:
                    writer = csv.DictWriter(fh, fieldnames=list(kept[0]))
                    writer.writeheader()
                    writer.writerows(kept)
            else:
                epochs.unlink()
            self.epoch_records = [_typed_epoch_row(r) for r in kept]

    def save_substitute(self, path, best: bool = False) -> None:
        params = self.best_params if best else self.substitute.state_dict()
        meta = {
            "kind": "substitute",
            "in_shape": list(self.substitute.in_shape),
            "class_count": self.substitute.class_count,
            "widths": list(self.substitute.widths),
            "gate_k": self.cfg.gate_k,
            "gate_mode": self.cfg.gate_mode,
            "epoch": self.best_epoch if best else self.epoch,
        }
        save_arrays(path, params, meta)


def _typed_epoch_row(row: dict) -> dict:
    out = {}
    for key, value in row.items():
        if key in ("epoch", "train_q"):
            out[key] = int(value)
        elif key == "keep_freq":
            out[key] = value
        else:
            out[key] = float(value)
    return out


def load_substitute(path) -> tuple[SubstituteNet, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "substitute":
        raise TrainingError(f"{path} is not a substitute checkpoint")
    sub = SubstituteNet(meta["in_shape"], meta["class_count"], meta["widths"], meta["gate_k"])
    sub.load_state_dict(arrays)
    return sub, meta


def run_distillation(cfg: TrainConfig, oracle: TargetOracle, run_dir=None, resume: bool = False, **build_kwargs) -> tuple[DistillResult, Distiller]:
    distiller = Distiller.build(cfg, oracle, run_dir=run_dir, **build_kwargs)
    if resume and run_dir is not None and (Path(run_dir) / "state.ckpt").exists():
        distiller.load_state(Path(run_dir) / "state.ckpt")
    return distiller.run(), distiller
