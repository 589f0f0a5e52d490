"""``dstkit`` command line: gen-data, train-target, distill, attack-eval, report, serve-target.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bitwise reproducible; must precede numpy
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig
from .config import ConfigError, experiment_part, load_config, set_key, write_resolved
from .core import load_arrays, save_arrays
from .data import Dataset, gen_blobs, load_idx
from .evaluation import EvalProtocol, FingerprintMismatch, assemble_report, dump_embeddings, evaluate, evaluate_random, fingerprint
from .nets import accuracy, build_target, train_classifier
from .oracle import JsonLinesClient, TargetOracle, TargetServer
from .trainer import TrainConfig, load_substitute, run_distillation

log = logging.getLogger("dstkit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class MissingArtifact(RuntimeError):
    pass


# -- artifact helpers ------------------------------------------------------

def _out(cfg: dict) -> Path:
    path = Path(cfg["output_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `dstkit {hint}` first")
    return path


def _dataset(cfg: dict) -> Dataset:
    return Dataset.load(_need(_out(cfg) / "dataset.npz", "gen-data"))


def _load_target(cfg: dict):
    arrays, meta = load_arrays(_need(_out(cfg) / "target.ckpt", "train-target"))
    model = build_target(meta["arch"], meta["in_shape"], meta["class_count"], meta["hidden"])
    model.load_state_dict(arrays)
    return model


def _oracle(cfg: dict, scenario: str, transcript=None) -> TargetOracle:
    endpoint = cfg["target"]["endpoint"]
    if not endpoint:
        return TargetOracle.in_process(_load_target(cfg), scenario)
    host, _, port = endpoint.rpartition(":")
    shape = cfg["target"]["input_shape"]
    classes = cfg["target"]["num_classes"]
    if not shape or not classes:
        ds = _dataset(cfg)
        shape, classes = ds.input_shape, ds.class_count
    client = JsonLinesClient(host or "127.0.0.1", int(port), transcript=transcript)
    return TargetOracle.external(client, scenario, shape, classes)


def _train_config(cfg: dict) -> TrainConfig:
    t, g = cfg["trainer"], cfg["gsil"]
    return TrainConfig(
        epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"], batch_size=t["batch_size"],
        lr_sub=t["lr_sub"], lr_gen=t["lr_gen"], decay_start_epoch=t["decay_start_epoch"], seed=cfg["seed"],
        alpha1=g["alpha1"], alpha2=g["alpha2"], normalize_nodes=g["normalize_nodes"], variant=t["variant"],
        gate_k=cfg["substitute"]["gate_k"], reuse_query=t["reuse_query"], noise_dim=cfg["generator"]["noise_dim"],
        probe_generated=t["probe_generated"], probe_uniform=t["probe_uniform"],
    )


def _attack_config(cfg: dict) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(
        method=a["method"], epsilon=a["epsilon"], step_size=min(a["step_size"], a["epsilon"]) if a["epsilon"] > 0 else a["step_size"],
        steps=a["steps"], cw_confidence=a["cw_confidence"], cw_search_steps=a["cw_search_steps"], cw_lr=a["cw_lr"],
        cw_iterations=a["cw_iterations"], cw_initial_const=a["cw_initial_const"], label_source=a["label_source"],
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: dict, args) -> None:
    d = cfg["dataset"]
    if d["kind"] == "blobs":
        ds = gen_blobs(d["classes"], d["dims"], d["n_per_class"], d["spread"], cfg["seed"], d["test_fraction"])
    else:
        if not d["images"] or not d["labels"]:
            raise ConfigError("dataset.images/dataset.labels: required when dataset.kind = 'idx'")
        ds = load_idx(d["images"], d["labels"], d["test_fraction"], cfg["seed"], d["classes"])
    out = _out(cfg)
    ds.save(out / "dataset.npz")
    print(f"wrote {out / 'dataset.npz'}: {ds.inputs.shape[0]} samples, {ds.class_count} classes, input shape {ds.input_shape}")


def cmd_train_target(cfg: dict, args) -> None:
    ds = _dataset(cfg)
    t = cfg["target"]
    model = build_target(t["arch"], ds.input_shape, ds.class_count, t["hidden"])
    history = train_classifier(model, *ds.train(), epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"], seed=cfg["seed"])
    acc = accuracy(model, *ds.test())
    meta = {"kind": "target", "arch": t["arch"], "in_shape": list(ds.input_shape), "class_count": ds.class_count,
            "hidden": t["hidden"], "test_accuracy": acc, "final_loss": history[-1]}
    save_arrays(_out(cfg) / "target.ckpt", model.state_dict(), meta)
    print(f"target test accuracy {acc:.4f}")


def cmd_distill(cfg: dict, args) -> None:
    run_dir = _out(cfg) / "distill"
    if not args.resume and run_dir.exists():
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, run_dir)
    transcript = [] if args.transcript else None
    oracle = _oracle(cfg, cfg["trainer"]["scenario"], transcript)
    tcfg = _train_config(cfg)
    result, distiller = run_distillation(
        tcfg, oracle, run_dir=run_dir, resume=args.resume, widths=tuple(cfg["substitute"]["widths"]),
        gen_hidden=cfg["generator"]["hidden"], gen_channels=cfg["generator"]["base_channels"],
    )
    save_arrays(run_dir / "generator.ckpt", distiller.generator.state_dict(),
                {"kind": "generator", "noise_dim": tcfg.noise_dim, "out_shape": list(oracle.input_shape)})
    distiller.save_substitute(run_dir / "substitute_final.ckpt")
    if cfg["eval"]["embeddings"] > 0:
        dump_embeddings(distiller.use_best(), distiller.generator, cfg["eval"]["embeddings"], run_dir / "embeddings.ckpt", cfg["seed"], tcfg.gate_mode)
    summary = {
        **result.summary(),
        "fingerprint": fingerprint(experiment_part(cfg)),
        "variant": tcfg.variant,
        "scenario": oracle.scenario,
        "ledger": result.ledger.to_dict(),
        "version": __version__,
    }
    _write_json(run_dir / "distill.json", summary)
    if transcript is not None:
        with open(run_dir / "transcript.jsonl", "w", encoding="utf-8") as fh:
            for req, resp in transcript:
                fh.write(req + "\n" + resp + "\n")
    print(f"agreement {result.initial_agreement:.4f} -> {result.final_agreement:.4f} (best {result.best_agreement:.4f} "
          f"at epoch {result.best_epoch}); skip rate {summary['skip_rate_pct']}%; train_q {result.ledger.train_queries}")


def cmd_attack_eval(cfg: dict, args) -> None:
    out = _out(cfg)
    distill = json.loads(_need(out / "distill" / "distill.json", "distill").read_text())
    current = fingerprint(experiment_part(cfg))
    if distill["fingerprint"] != current:
        raise FingerprintMismatch(f"distill run has fingerprint {distill['fingerprint']}, current config {current}; re-run distill")
    substitute, sub_meta = load_substitute(_need(out / "distill" / "substitute_best.ckpt", "distill"))
    ds = _dataset(cfg)
    x, y = ds.test()
    limit = cfg["eval"]["limit"]
    if limit:
        x, y = x[:limit], y[:limit]
    oracle = _oracle(cfg, distill["scenario"])
    attack = _attack_config(cfg)
    mode = cfg["eval"]["mode"]
    protocol = EvalProtocol(mode, attack, cfg["eval"]["target_class"] if mode == "target" else None,
                            cfg["eval"]["repeats"], cfg["seed"])
    ev = evaluate(substitute, oracle, x, y, protocol)
    record = {
        **ev.to_dict(),
        "fingerprint": fingerprint(experiment_part(cfg)),
        "attack": attack.method, "mode": mode, "epsilon": attack.epsilon, "repeats": protocol.repeats,
    }
    if cfg["eval"]["random_baseline"]:
        record["random_asr_mean"] = evaluate_random(oracle, x, y, attack.epsilon, protocol.repeats, cfg["seed"]).asr_mean
    ledger = oracle.ledger_snapshot().to_dict()
    ledger["train_q"] = distill["ledger"]["train_q"]
    record["ledger"] = ledger
    _write_json(out / "eval.json", record)
    write_resolved(cfg, out / "eval")
    print(f"{attack.method} {mode} ASR {ev.asr_mean:.2f} ± {ev.asr_std:.2f} over {protocol.repeats} repeats"
          + (f" (random baseline {record['random_asr_mean']:.2f})" if "random_asr_mean" in record else ""))


def cmd_report(cfg: dict, args) -> None:
    out = _out(cfg)
    distill = json.loads(_need(out / "distill" / "distill.json", "distill").read_text())
    evaluation = json.loads(_need(out / "eval.json", "attack-eval").read_text())
    report = assemble_report(distill, evaluation)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    if args.format == "json":
        print(report.to_json())
    elif args.format == "csv":
        print(report.to_csv(), end="")
    else:
        print(report.render_table())


def cmd_serve_target(cfg: dict, args) -> None:
    model = _load_target(cfg)
    server = TargetServer(model, args.scenario or cfg["trainer"]["scenario"], args.host, args.port)
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-target": cmd_train_target,
    "distill": cmd_distill,
    "attack-eval": cmd_attack_eval,
    "report": cmd_report,
    "serve-target": cmd_serve_target,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-o", "--out", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dstkit", description="Data-free substitute training and transfer attacks.")
    parser.add_argument("--version", action="version", version=f"dstkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate or import the toy dataset")
    sub.add_parser("train-target", parents=[common], help="train the in-process target model")
    p = sub.add_parser("distill", parents=[common], help="train a substitute against the target")
    p.add_argument("--scenario", choices=("probability", "label"))
    p.add_argument("--variant", choices=("baseline-i", "baseline-ii", "gsil", "dst"))
    p.add_argument("--resume", action="store_true", help="continue from distill/state.ckpt")
    p.add_argument("--transcript", action="store_true", help="record external-target traffic to distill/transcript.jsonl")
    p = sub.add_parser("attack-eval", parents=[common], help="craft on the substitute, measure ASR on the target")
    p.add_argument("--attack", choices=("fgsm", "bim", "pgd", "cw"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--step-size", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("non_target", "target"))
    p.add_argument("--target-class", help="class index or 'round-robin'")
    p.add_argument("--repeats", type=int)
    p = sub.add_parser("report", parents=[common], help="render the run report")
    p.add_argument("--format", choices=("table", "json", "csv"), default="table")
    p = sub.add_parser("serve-target", parents=[common], help="serve the target over the JSON-lines protocol")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--scenario", choices=("probability", "label"))
    return parser


FLAG_KEYS = {
    "scenario": "trainer.scenario", "variant": "trainer.variant", "attack": "attack.method",
    "epsilon": "attack.epsilon", "step_size": "attack.step_size", "steps": "attack.steps",
    "mode": "eval.mode", "repeats": "eval.repeats",
}


def resolve(args) -> dict:
    cfg = load_config(args.config, args.set)
    if args.out:
        cfg["output_dir"] = args.out
    if args.command != "serve-target":
        for flag, key in FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                set_key(cfg, key, value)
    tc = getattr(args, "target_class", None)
    if tc is not None:
        set_key(cfg, "eval.target_class", int(tc) if tc.lstrip("-").isdigit() else tc)
    from .config import validate
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary maps failures to the exit code contract
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
