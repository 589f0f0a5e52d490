"""Black-box target access: query scenarios, the query ledger, and the
newline-delimited JSON wire protocol for external targets.

Wire protocol (UTF-8, one compact JSON object per line)::

    request:  {"id": <u64>, "inputs": [[x0, x1, ...], ...]}   # samples flattened row-major
    response: {"id": <same>, "probs": [[p0, p1, ...], ...]}   # probability scenario
          or  {"id": <same>, "label": [c0, c1, ...]}          # label scenario
"""

from __future__ import annotations

import copy
import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Module, ops
from .core.tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

SCENARIOS = ("probability", "label")
PHASES = ("train", "eval")


class TransportError(ConnectionError):
    """External target unreachable; retriable."""

    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class ProtocolError(ValueError):
    """Malformed or mismatched wire message."""


@dataclass
class QueryLedger:
    train_queries: int = 0
    eval_queries: int = 0
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.train_queries + self.eval_queries

    def record(self, phase: str, n: int, tag: Optional[str] = None) -> None:
        if phase == "train":
            self.train_queries += n
        elif phase == "eval":
            self.eval_queries += n
        else:
            raise ValueError(f"unknown query phase {phase!r}")
        key = phase if tag is None else f"{phase}:{tag}"
        self.breakdown[key] = self.breakdown.get(key, 0) + n

    def copy(self) -> "QueryLedger":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {"train_q": self.train_queries, "eval_q": self.eval_queries, "breakdown": dict(self.breakdown)}

    @classmethod
    def from_dict(cls, d: dict) -> "QueryLedger":
        return cls(int(d["train_q"]), int(d["eval_q"]), {k: int(v) for k, v in d.get("breakdown", {}).items()})


def argmax_onehot(scores: np.ndarray, k: Optional[int] = None) -> np.ndarray:
    labels = np.argmax(scores, axis=1) if scores.ndim == 2 else np.asarray(scores, dtype=np.int64)
    k = scores.shape[1] if k is None else k
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def model_probabilities(model: Module, x: np.ndarray) -> np.ndarray:
    return ops.softmax(model(Tensor(x)), axis=-1).data


class TargetOracle:
    """Query-only view of a target model.

    The backing model lives inside a closure; the public surface is
    ``query``, ``ledger_snapshot`` and three descriptive attributes.
    """

    __slots__ = ("scenario", "input_shape", "num_outputs", "_answer", "_ledger", "_lock")

    def __init__(self, answer: Callable[[np.ndarray], np.ndarray], scenario: str, input_shape: Sequence[int], num_outputs: int) -> None:
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        self.scenario = scenario
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_outputs = int(num_outputs)
        self._answer = answer
        self._ledger = QueryLedger()
        self._lock = threading.Lock()

    @classmethod
    def in_process(cls, model: Module, scenario: str = "probability") -> "TargetOracle":
        model.freeze()

        def answer(x: np.ndarray) -> np.ndarray:
            return model_probabilities(model, x)

        return cls(answer, scenario, model.in_shape, model.class_count)

    @classmethod
    def external(cls, client: "JsonLinesClient", scenario: str, input_shape: Sequence[int], num_outputs: int) -> "TargetOracle":
        def answer(x: np.ndarray) -> np.ndarray:
            reply = client.request(x.reshape(x.shape[0], -1))
            if "probs" in reply:
                return np.asarray(reply["probs"], dtype=np.float64)
            return argmax_onehot(np.asarray(reply["label"], dtype=np.int64), num_outputs)

        return cls(answer, scenario, input_shape, num_outputs)

    def query(self, x, phase: str = "train", tag: Optional[str] = None) -> np.ndarray:
        """Answer a batch and charge the ledger one query per sample."""
        if phase not in PHASES:
            raise ValueError(f"unknown query phase {phase!r}")
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("oracle query", x.shape, (None,) + self.input_shape)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("oracle inputs must lie in [0, 1]")
        out = np.asarray(self._answer(x), dtype=np.float64)
        if out.shape != (x.shape[0], self.num_outputs):
            raise ProtocolError(f"target returned shape {out.shape}, expected {(x.shape[0], self.num_outputs)}")
        with self._lock:
            self._ledger.record(phase, x.shape[0], tag)
        if self.scenario == "label":
            return argmax_onehot(out)
        return out

    def ledger_snapshot(self) -> QueryLedger:
        with self._lock:
            return self._ledger.copy()

    def restore_ledger(self, ledger: QueryLedger) -> None:
        """Reinstate counters from a checkpoint when resuming a run."""
        with self._lock:
            self._ledger = ledger.copy()


# -- wire protocol ------------------------------------------------------

def encode(obj: dict) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def decode(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed line: {exc}") from None
    if not isinstance(obj, dict) or "id" not in obj:
        raise ProtocolError(f"message without id: {line[:80]!r}")
    return obj


def make_request(req_id: int, inputs: np.ndarray) -> dict:
    return {"id": int(req_id), "inputs": np.asarray(inputs, dtype=np.float64).tolist()}


def validate_response(reply: dict, req_id: int, batch: int) -> None:
    if reply.get("id") != req_id:
        raise ProtocolError(f"response id {reply.get('id')!r} does not echo request id {req_id}")
    if "error" in reply:
        raise ProtocolError(f"target error for request {req_id}: {reply['error']}")
    if "probs" in reply:
        if len(reply["probs"]) != batch:
            raise ProtocolError(f"expected {batch} probability rows, got {len(reply['probs'])}")
    elif "label" in reply:
        if len(reply["label"]) != batch or not all(isinstance(c, int) for c in reply["label"]):
            raise ProtocolError(f"expected {batch} integer labels")
    else:
        raise ProtocolError("response carries neither 'probs' nor 'label'")


class JsonLinesClient:
    """One TCP connection to a JSON-lines target; requests are serialized.

    Transport failures reconnect and retry up to ``max_attempts`` times. Every
    exchanged pair of lines is appended to ``transcript`` when it is a list.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0, max_attempts: int = 3, transcript: Optional[list] = None) -> None:
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self.max_attempts = max(1, int(max_attempts))
        self.transcript = transcript
        self._next_id = 1
        self._sock: Optional[socket.socket] = None
        self._reader = None
        self._lock = threading.Lock()

    def _connect(self) -> None:
        self.close()
        self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._reader = self._sock.makefile("rb")

    def close(self) -> None:
        if self._reader is not None:
            self._reader.close()
        if self._sock is not None:
            self._sock.close()
        self._sock = self._reader = None

    def request(self, inputs: np.ndarray) -> dict:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            line = encode(make_request(req_id, inputs))
            last: Optional[Exception] = None
            for attempt in range(1, self.max_attempts + 1):
                try:
                    if self._sock is None:
                        self._connect()
                    self._sock.sendall(line)
                    raw = self._reader.readline()
                    if not raw:
                        raise ConnectionError("connection closed by target")
                    break
                except OSError as exc:
                    last = exc
                    log.warning("target transport failure on attempt %d: %s", attempt, exc)
                    self.close()
            else:
                raise TransportError(f"request {req_id} to {self.host}:{self.port} failed: {last}", self.max_attempts)
            reply = decode(raw)
            validate_response(reply, req_id, len(inputs))
            if self.transcript is not None:
                self.transcript.append((line.decode("utf-8").rstrip("\n"), raw.decode("utf-8").rstrip("\n")))
            return reply

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def answer_request(model: Module, scenario: str, request: dict) -> dict:
    """Server-side handling of one decoded request."""
    req_id = request["id"]
    try:
        x = np.asarray(request["inputs"], dtype=np.float64)
        x = x.reshape((x.shape[0],) + tuple(model.in_shape))
        probs = model_probabilities(model, x)
    except Exception as exc:  # reported on the wire, never fatal to the server
        return {"id": req_id, "error": str(exc)}
    if scenario == "label":
        return {"id": req_id, "label": [int(c) for c in np.argmax(probs, axis=1)]}
    return {"id": req_id, "probs": probs.tolist()}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            if not raw.strip():
                continue
            try:
                request = decode(raw)
            except ProtocolError as exc:
                self.wfile.write(encode({"id": None, "error": str(exc)}))
                continue
            self.wfile.write(encode(answer_request(self.server.model, self.server.scenario, request)))
            self.wfile.flush()


class TargetServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, model: Module, scenario: str = "probability", host: str = "127.0.0.1", port: int = 0) -> None:
        if scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        model.freeze()
        self.model = model
        self.scenario = scenario
        super().__init__((host, port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
