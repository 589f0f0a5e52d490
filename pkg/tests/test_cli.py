"""Command line, configuration and dataset plumbing."""

import json
import os
import socket
import subprocess
import sys
import threading
from pathlib import Path

import numpy as np
import pytest

from dstkit.cli import main
from dstkit.config import ConfigError, load_config, parse_override
from dstkit.core import load_arrays
from dstkit.data import DataFormatError, Dataset, gen_blobs, load_idx, write_idx

import external_target

TINY = [
    "dataset.n_per_class=60", "target.epochs=30", "target.hidden=[32]",
    "trainer.epochs=2", "trainer.steps_per_epoch=3", "trainer.batch_size=16", "trainer.decay_start_epoch=1",
    "trainer.probe_generated=32", "trainer.probe_uniform=32", "substitute.widths=[8,8]", "generator.hidden=16",
    "attack.steps=5", "attack.step_size=0.06", "eval.repeats=2", "eval.embeddings=8",
]


def run(out, *args, extra=()):
    argv = list(args) + ["-o", str(out)]
    for kv in list(TINY) + list(extra):
        argv += ["--set", kv]
    return main(argv)


def export_mlp(ckpt: Path, path: Path, scenario: str) -> None:
    """Dump a trained MLP target as plain JSON for the stand-alone server."""
    arrays, meta = load_arrays(ckpt)
    n = len(meta["hidden"]) + 1
    layers = [{"weight": arrays[f"layers.{i}.weight"].tolist(), "bias": arrays[f"layers.{i}.bias"].tolist()} for i in range(n)]
    path.write_text(json.dumps({"scenario": scenario, "layers": layers}))


def serve_external(weights: Path):
    server = external_target.make_server(weights)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


# -- config -------------------------------------------------------------------

def test_config_file_overrides_and_env(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seed = 4\n[trainer]\nepochs = 12\ndecay_start_epoch = 6\n')
    cfg = load_config(str(path), ["trainer.batch_size=32", 'trainer.variant="gsil"'], env={})
    assert (cfg["seed"], cfg["trainer"]["epochs"], cfg["trainer"]["batch_size"], cfg["trainer"]["variant"]) == (4, 12, 32, "gsil")
    assert load_config(str(path), [], env={"DST_SEED": "9"})["seed"] == 9
    assert load_config(str(path), ["seed=1"], env={"DST_SEED": "9"})["seed"] == 1
    assert parse_override("trainer.variant=dst") == ("trainer.variant", "dst")
    assert parse_override("substitute.widths=[4, 4]") == ("substitute.widths", [4, 4])


@pytest.mark.parametrize("text,path", [
    ("[trainer]\nepoch = 3\n", "trainer.epoch"),
    ("[trainer]\nepochs = \"many\"\n", "trainer.epochs"),
    ("[trainer]\nvariant = \"dsst\"\n", "trainer.variant"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[trainer]\nepochs = 10\ndecay_start_epoch = 10\n", "trainer.decay_start_epoch"),
])
def test_config_errors_name_the_key(tmp_path, text, path):
    f = tmp_path / "c.toml"
    f.write_text(text)
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        load_config(str(f), [], env={})


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["gen-data", "-o", str(tmp_path), "--set", "dataset.clases=3"]) == 2
    assert "dataset.clases" in capsys.readouterr().err
    assert main(["gen-data", "-o", str(tmp_path)], ) == 0
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [unclosed\n")
    assert main(["gen-data", "-c", str(bad)]) == 2


def test_missing_artifact_is_runtime_error(tmp_path, capsys):
    assert main(["distill", "-o", str(tmp_path)]) == 3
    assert "train-target" in capsys.readouterr().err


def test_blob_shipped_config_parses():
    cfg = load_config(str(Path(__file__).parents[1] / "configs" / "blobs.toml"), [], env={})
    t = cfg["trainer"]
    assert 2 * t["epochs"] * t["steps_per_epoch"] * t["batch_size"] <= 200_000


# -- data ---------------------------------------------------------------------

def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(tmp_path / name, "gen-data") == 0
    a, b = Dataset.load(tmp_path / "a" / "dataset.npz"), Dataset.load(tmp_path / "b" / "dataset.npz")
    assert a.inputs.tobytes() == b.inputs.tobytes() and (a.train_idx == b.train_idx).all()
    assert run(tmp_path / "c", "gen-data", extra=["seed=1"]) == 0
    assert Dataset.load(tmp_path / "c" / "dataset.npz").inputs.tobytes() != a.inputs.tobytes()


def test_blobs_shape_and_range():
    ds = gen_blobs(3, 2, 50, 0.05, seed=0)
    assert ds.inputs.shape == (150, 2) and ds.class_count == 3
    assert ds.inputs.min() >= 0 and ds.inputs.max() <= 1
    assert len(set(ds.train_idx) | set(ds.test_idx)) == 150 and not set(ds.train_idx) & set(ds.test_idx)


def test_idx_round_trip_and_errors(tmp_path):
    images = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4)
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", images, [3, 7])
    raw = (tmp_path / "i.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and raw[4:16] == b"\x00\x00\x00\x02\x00\x00\x00\x04\x00\x00\x00\x04"
    ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", test_fraction=0.5)
    assert ds.inputs.shape == (2, 1, 4, 4) and ds.inputs[1, 0, 0, 0] == 16 / 255
    assert ds.labels.tolist() == [3, 7]
    (tmp_path / "short.idx").write_bytes(raw[:20])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(tmp_path / "short.idx", tmp_path / "l.idx")
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "l.idx", tmp_path / "l.idx")


# -- end to end ---------------------------------------------------------------

def test_full_pipeline_and_rerun_determinism(tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target", "distill", "attack-eval"):
        assert run(out, cmd) == 0, cmd
    for fmt in ("table", "json", "csv"):
        assert run(out, "report", "--format", fmt) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["train_q"] == 2 * 2 * 3 * 16 and report["test_q"] == 0
    assert report["repeats"] == 2 and 0 <= report["asr_mean"] <= 100
    distill = out / "distill"
    for f in ("metrics.jsonl", "epochs.csv", "state.ckpt", "substitute_best.ckpt", "generator.ckpt",
              "embeddings.ckpt", "config.resolved.toml"):
        assert (distill / f).exists(), f
    first = (distill / "metrics.jsonl").read_bytes()
    eval_first = (out / "eval.json").read_bytes()
    assert run(out, "distill") == 0 and run(out, "attack-eval") == 0
    assert (distill / "metrics.jsonl").read_bytes() == first
    assert (out / "eval.json").read_bytes() == eval_first
    assert "Test-Q" in capsys.readouterr().out


def test_resume_continues_run(tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target"):
        assert run(out, cmd) == 0
    assert run(out, "distill") == 0
    full = (out / "distill" / "metrics.jsonl").read_bytes()
    assert run(out, "distill", "--resume", extra=["trainer.epochs=2"]) == 0
    assert (out / "distill" / "metrics.jsonl").read_bytes() == full


def test_report_refuses_fingerprint_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target", "distill", "attack-eval"):
        assert run(out, cmd) == 0
    assert run(out, "attack-eval", extra=["trainer.variant=gsil"]) == 3
    assert "fingerprint" in capsys.readouterr().err
    record = json.loads((out / "eval.json").read_text())
    record["fingerprint"] = "0" * 16
    (out / "eval.json").write_text(json.dumps(record))
    assert run(out, "report") == 3
    assert "fingerprint" in capsys.readouterr().err


@pytest.mark.parametrize("scenario", ["probability", "label"])
def test_distill_both_scenarios(tmp_path, scenario):
    out = tmp_path / scenario
    for cmd in ("gen-data", "train-target"):
        assert run(out, cmd) == 0
    assert run(out, "distill", "--scenario", scenario, "--variant", "baseline-ii") == 0
    summary = json.loads((out / "distill" / "distill.json").read_text())
    assert summary["scenario"] == scenario and summary["variant"] == "baseline-ii"
    assert summary["keep_pattern"] == [1, 1]  # force_keep_all


def test_idx_dataset_with_lenet_target(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 40)
    images = np.where(labels[:, None, None] == 1, 200, 30) + rng.integers(0, 40, (40, 8, 8))
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", images.astype(np.uint8), labels)
    extra = [f'dataset.kind="idx"', f'dataset.images="{tmp_path / "i.idx"}"', f'dataset.labels="{tmp_path / "l.idx"}"',
             "dataset.classes=2", 'target.arch="lenet"', "target.epochs=2", "trainer.epochs=1", "trainer.decay_start_epoch=0",
             "trainer.batch_size=4", "trainer.probe_generated=4", "trainer.probe_uniform=4", "generator.base_channels=4",
             "attack.epsilon=0.1", "attack.step_size=0.05", "attack.steps=2"]
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target", "distill", "attack-eval"):
        assert run(out, cmd, extra=extra) == 0, cmd


def test_external_target_via_endpoint(tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target"):
        assert run(out, cmd) == 0
    export_mlp(out / "target.ckpt", tmp_path / "w.json", "probability")
    server = serve_external(tmp_path / "w.json")
    try:
        endpoint = f'target.endpoint="127.0.0.1:{server.server_address[1]}"'
        assert run(out, "distill", "--transcript", extra=[endpoint]) == 0
        lines = (out / "distill" / "transcript.jsonl").read_text().splitlines()
        assert len(lines) == 2 * (1 + 2 * 2 * 3)  # probe plus two batches per iteration
    finally:
        server.shutdown()
        server.server_close()


def test_serve_target_answers_handcrafted_request(tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-target"):
        assert run(out, cmd) == 0
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    env = {**os.environ, "PYTHONPATH": str(Path(__file__).parents[1] / "src")}
    proc = subprocess.Popen([sys.executable, "-m", "dstkit", "serve-target", "-o", str(out), "--port", str(port),
                             "--scenario", "label"], stdout=subprocess.PIPE, text=True, env=env)
    try:
        assert proc.stdout.readline().startswith("listening on")
        with socket.create_connection(("127.0.0.1", port), timeout=10) as conn:
            conn.sendall(b'{"id": 42, "inputs": [[0.5, 0.5], [0.1, 0.9]]}\n')
            reply = json.loads(conn.makefile("rb").readline())
        assert reply["id"] == 42 and len(reply["label"]) == 2 and all(isinstance(c, int) for c in reply["label"])
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_console_entry_point_and_env_seed(tmp_path):
    env = {**os.environ, "DST_SEED": "5"}
    res = subprocess.run([sys.executable, "-m", "dstkit", "gen-data", "-o", str(tmp_path)], env=env,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    resolved = gen_blobs(3, 2, 200, 0.08, seed=5)
    assert Dataset.load(tmp_path / "dataset.npz").inputs.tobytes() == resolved.inputs.tobytes()
    res = subprocess.run([sys.executable, "-m", "dstkit", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("dstkit")
