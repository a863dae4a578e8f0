"""Refiner backends: given a source text, propose ``n`` refined source texts.

Three backends share one call shape, ``refine(source_text, n, seed)``:

* ``OracleRefiner`` applies the random refinement rules directly,
* ``LearnedRefiner`` samples from a trained character-level seq2seq,
* ``ExternalRefiner`` asks a remote service over HTTP.

Remote wire protocol: the client POSTs one JSON object followed by a
newline, ``{"source": str, "n": int, "temperature": float}`` (plus an
optional integer ``"seed"``), and expects one JSON object line back,
``{"candidates": [str, ...]}``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .dsl import DSLError, ModelSpec, parse, render, render_compact
from .nn.checkpoint import load_into, read_checkpoint, save_checkpoint
from .nn.seq2seq import CharVocab, Seq2Seq, build_seq2seq
from .refine import mutate

log = logging.getLogger(__name__)


class InvalidSource(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


class Refiner(Protocol):
    backend_id: str

    def refine(self, source_text: str, n: int, seed: int) -> list[str]: ...

    def descriptor(self) -> dict: ...


def _parse_source(source_text: str, context: dict) -> ModelSpec:
    try:
        return parse(source_text, **context)
    except DSLError as exc:
        raise InvalidSource(str(exc)) from exc


class OracleRefiner:
    """Candidates drawn from the dataset's own mutation rule; always valid."""

    backend_id = "oracle"

    def __init__(self, **parse_context):
        self.parse_context = parse_context

    def refine(self, source_text: str, n: int, seed: int = 0) -> list[str]:
        spec = _parse_source(source_text, self.parse_context)
        return [render(mutate(spec, np.random.default_rng([seed, i]))[0]) for i in range(n)]

    def descriptor(self) -> dict:
        return {"backend": self.backend_id, "config_digest": _digest(self.parse_context)}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class LearnedRefiner:
    """Temperature/top-k sampling from a character-level seq2seq.

    Decodings that parse are re-rendered in canonical form; the rest are
    returned verbatim so downstream evaluation discards them.
    """

    backend_id = "learned"

    def __init__(
        self,
        model: Seq2Seq,
        vocab: CharVocab = CharVocab(),
        temperature: float = 1.0,
        top_k: int = 16,
        **parse_context,
    ):
        self.model = model
        self.vocab = vocab
        self.temperature = temperature
        self.top_k = top_k
        self.parse_context = parse_context

    def refine(self, source_text: str, n: int, seed: int = 0) -> list[str]:
        spec = _parse_source(source_text, self.parse_context)
        src = self.vocab.encode(render_compact(spec), self.model.max_len)
        rng = np.random.default_rng(seed)
        outs = self.model.generate(src, n, rng, self.temperature, self.top_k)
        return [self._expand(self.vocab.decode(ids)) for ids in outs]

    def _expand(self, text: str) -> str:
        try:
            return render(parse(text, **self.parse_context))
        except DSLError:
            return text

    def descriptor(self) -> dict:
        return {
            "backend": self.backend_id,
            "spec": render_compact(self.model.spec),
            "temperature": self.temperature,
            "top_k": self.top_k,
            "config_digest": _digest([self.parse_context, self.temperature, self.top_k]),
        }

    def save(self, path) -> None:
        meta = {
            "spec": render(self.model.spec),
            "alphabet": self.vocab.alphabet,
            "max_len": self.model.max_len,
            "parse_context": {k: list(v) if isinstance(v, tuple) else v for k, v in self.parse_context.items()},
        }
        save_checkpoint(path, self.model, meta)

    @classmethod
    def from_checkpoint(cls, path, temperature: float = 1.0, top_k: int = 16) -> "LearnedRefiner":
        if not Path(path).exists():
            raise MissingCheckpoint(f"no refiner checkpoint at {path}")
        meta, tensors = read_checkpoint(path)
        context = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["parse_context"].items()}
        spec = parse(meta["spec"])
        vocab = CharVocab(meta["alphabet"])
        model = build_seq2seq(spec, vocab.size, meta["max_len"])
        load_into(model, tensors)
        return cls(model, vocab, temperature, top_k, **context)


class ExternalRefiner:
    """Client for a remote refiner; failures degrade to ``n`` empty candidates."""

    backend_id = "external"

    def __init__(self, url: str, timeout: float = 30.0, temperature: float = 1.0):
        self.url = url
        self.timeout = timeout
        self.temperature = temperature
        self.last_error: Optional[str] = None

    def refine(self, source_text: str, n: int, seed: int = 0) -> list[str]:
        body = json.dumps({"source": source_text, "n": n, "temperature": self.temperature, "seed": seed}) + "\n"
        req = urllib.request.Request(self.url, data=body.encode("utf-8"), headers={"Content-Type": "application/x-ndjson"})
        self.last_error = None
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read().decode("utf-8")
        except TimeoutError as exc:
            return self._fail(n, f"Timeout: {exc}")
        except urllib.error.URLError as exc:
            kind = "Timeout" if isinstance(exc.reason, TimeoutError) else "TransportError"
            return self._fail(n, f"{kind}: {exc.reason}")
        except OSError as exc:
            return self._fail(n, f"TransportError: {exc}")
        try:
            line = payload.strip().splitlines()[0]
            candidates = json.loads(line)["candidates"]
            if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
                raise TypeError("candidates must be a list of strings")
        except (IndexError, KeyError, TypeError, ValueError) as exc:
            return self._fail(n, f"ProtocolError: {exc}")
        return (candidates + [""] * n)[:n]

    def _fail(self, n: int, message: str) -> list[str]:
        self.last_error = message
        log.warning("external refiner failed (%s); returning %d empty candidates", message, n)
        return [""] * n

    def descriptor(self) -> dict:
        return {"backend": self.backend_id, "url": self.url, "timeout": self.timeout, "temperature": self.temperature}


def serve_mock(host: str = "127.0.0.1", port: int = 0, **parse_context) -> ThreadingHTTPServer:
    """Start a background HTTP server answering with oracle mutations."""
    oracle = OracleRefiner(**parse_context)

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            try:
                req = json.loads(self.rfile.read(length).decode("utf-8").splitlines()[0])
                candidates = oracle.refine(req["source"], int(req["n"]), int(req.get("seed", 0)))
                status, body = 200, {"candidates": candidates}
            except (InvalidSource, KeyError, ValueError, IndexError) as exc:
                status, body = 400, {"error": str(exc)}
            data = (json.dumps(body) + "\n").encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer((host, port), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server
