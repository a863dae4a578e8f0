"""Candidate validation and scoring.

Both tracks turn arbitrary candidate text into a ``CandidateReport``;
nothing a candidate contains can make evaluation raise.
"""
from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dsl import DEFAULT_D_MODEL, CnnSpec, DSLError, TransformerSpec, parse, render, render_compact
from .nn.network import BuildError, TaskShape, build, cnn_param_count
from .nn.seq2seq import CharVocab, TokenPairs, build_seq2seq, seq2seq_param_count
from .nn.training import ArrayData, DeadlineExceeded, DivergenceError, TrainConfig, accuracy, train
from .refine import RefinementPair

OK, ERROR, SKIPPED, TIMEOUT = "ok", "error", "skipped", "timeout"
TRACKS = ("selfprog", "classifier")
DEFAULT_EPOCHS = {"selfprog": 1, "classifier": 2}


@dataclass(frozen=True)
class EvalConfig:
    track: str = "selfprog"
    subset_size: int = 1024
    epochs: Optional[int] = None
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    time_limit: float = 120.0
    max_len: int = 24
    d_model: int = DEFAULT_D_MODEL
    enforce_ranges: bool = True

    def __post_init__(self):
        if self.track not in TRACKS:
            raise ValueError(f"unknown track {self.track!r}")
        if self.subset_size < 1 or self.batch_size < 1 or self.time_limit <= 0:
            raise ValueError("subset_size, batch_size and time_limit must be positive")

    @property
    def effective_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.track] if self.epochs is None else self.epochs


@dataclass
class CandidateReport:
    candidate_text: str
    index: int = 0
    parse_status: str = SKIPPED
    build_status: str = SKIPPED
    train_status: str = SKIPPED
    error: Optional[str] = None
    fewshot_loss: Optional[float] = None
    accuracy: Optional[float] = None
    param_count: Optional[int] = None
    loss_curve: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def valid(self) -> bool:
        return self.parse_status == OK and self.build_status == OK and self.train_status == OK

    def metric(self, track: str) -> Optional[float]:
        value = self.fewshot_loss if track == "selfprog" else self.accuracy
        if value is None or not math.isfinite(value):
            return None
        return value

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            del d["wall_time"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateReport":
        return cls(**d)


def candidate_seed(run_seed: int, canonical_text: str) -> int:
    digest = hashlib.sha256(f"{run_seed}\n{canonical_text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _as_text(candidate) -> str:
    if isinstance(candidate, bytes):
        return candidate.decode("utf-8", errors="replace")
    return str(candidate)


def encode_pairs(pairs: Sequence[RefinementPair], vocab: CharVocab = CharVocab(), max_len: int = 24, **parse_context) -> TokenPairs:
    """Tokenise refinement pairs through their compact one-line form."""
    ids = []
    for pair in pairs:
        src = render_compact(parse(pair.input_text, **parse_context))
        tgt = render_compact(parse(pair.output_text, **parse_context))
        ids.append((vocab.encode(src, max_len), vocab.encode(tgt, max_len)))
    return TokenPairs(ids)


def _parse_stage(report: CandidateReport, text: str, kind, config: EvalConfig, **context):
    try:
        spec = parse(text, d_model=config.d_model, **context)
    except DSLError as exc:
        report.parse_status, report.error = ERROR, f"parse: {exc}"
        return None
    except Exception as exc:  # noqa: BLE001 - totality over arbitrary input
        report.parse_status, report.error = ERROR, f"parse: {type(exc).__name__}: {exc}"
        return None
    report.parse_status = OK
    if not isinstance(spec, kind):
        report.build_status, report.error = ERROR, f"build: expected a {kind.__name__}"
        return None
    if config.enforce_ranges and spec.range_violations():
        report.build_status, report.error = ERROR, "build: out of range: " + ", ".join(spec.range_violations())
        return None
    return spec


def _train_stage(report: CandidateReport, model, data, config: EvalConfig, started: float):
    tc = TrainConfig(lr=config.lr, batch_size=config.batch_size, epochs=config.effective_epochs, seed=config.seed)
    try:
        result = train(model, data, tc, deadline=started + config.time_limit)
    except DeadlineExceeded as exc:
        report.train_status, report.error = TIMEOUT, f"train: {exc}"
        return None
    except DivergenceError as exc:
        report.train_status, report.error = ERROR, f"train: {exc}"
        return None
    except Exception as exc:  # noqa: BLE001
        report.train_status, report.error = ERROR, f"train: {type(exc).__name__}: {exc}"
        return None
    report.train_status = OK
    report.loss_curve = list(result.step_losses)
    return result


def evaluate_selfprog(candidate_text, data: TokenPairs, config: EvalConfig = EvalConfig()) -> CandidateReport:
    """Few-shot proxy: mean per-step loss of one short run on the first pairs."""
    started = time.monotonic()
    text = _as_text(candidate_text)
    report = CandidateReport(text)
    if len(data) < config.subset_size:
        raise ValueError(f"need {config.subset_size} refinement pairs, got {len(data)}")
    spec = _parse_stage(report, text, TransformerSpec, config)
    if spec is not None:
        vocab = CharVocab()
        try:
            model = build_seq2seq(spec, vocab.size, config.max_len, seed=candidate_seed(config.seed, render(spec)))
            report.param_count = seq2seq_param_count(spec, vocab.size)
            report.build_status = OK
        except (BuildError, MemoryError, ValueError) as exc:
            report.build_status, report.error = ERROR, f"build: {exc}"
        else:
            result = _train_stage(report, model, data.head(config.subset_size), config, started)
            if result is not None:
                report.fewshot_loss = result.avg_loss
    report.wall_time = time.monotonic() - started
    return report


@dataclass(frozen=True)
class ClassifierTask:
    """An image dataset with index-disjoint train and evaluation subsets."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    train_idx: np.ndarray
    eval_idx: np.ndarray

    def __post_init__(self):
        if len(self.eval_idx) == 0:
            raise ValueError("evaluation subset is empty")
        if len(self.train_idx) == 0:
            raise ValueError("training subset is empty")
        overlap = np.intersect1d(self.train_idx, self.eval_idx)
        if len(overlap):
            raise ValueError(f"train and eval subsets share {len(overlap)} indices")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.x.shape[1:])

    @classmethod
    def from_dataset(cls, dataset, train_idx, eval_idx) -> "ClassifierTask":
        return cls(dataset.images, dataset.labels, dataset.class_count, np.asarray(train_idx), np.asarray(eval_idx))


def evaluate_classifier(candidate_text, task: ClassifierTask, config: EvalConfig = EvalConfig(track="classifier")) -> CandidateReport:
    """Train the CNN a fixed number of epochs, report held-out accuracy."""
    started = time.monotonic()
    text = _as_text(candidate_text)
    report = CandidateReport(text)
    context = {"input_shape": task.input_shape, "num_classes": task.num_classes}
    spec = _parse_stage(report, text, CnnSpec, config, **context)
    if spec is not None:
        try:
            model = build(spec, TaskShape(task.input_shape, task.num_classes), seed=candidate_seed(config.seed, render(spec)))
            report.param_count = cnn_param_count(spec)
            report.build_status = OK
        except (BuildError, MemoryError, ValueError) as exc:
            report.build_status, report.error = ERROR, f"build: {exc}"
        else:
            data = ArrayData(task.x[task.train_idx], task.y[task.train_idx])
            if _train_stage(report, model, data, config, started) is not None:
                report.accuracy = accuracy(model, task.x[task.eval_idx], task.y[task.eval_idx])
    report.wall_time = time.monotonic() - started
    return report


def canonical_key(text: str, config: EvalConfig, **context) -> str:
    """Cache key: canonical rendering when the text parses, else the raw text."""
    try:
        return "spec:" + render(parse(text, d_model=config.d_model, **context))
    except Exception:  # noqa: BLE001
        return "raw:" + text


def _evaluate_one(args):
    track, text, payload, config = args
    if track == "selfprog":
        return evaluate_selfprog(text, payload, config)
    return evaluate_classifier(text, payload, config)


class Evaluator:
    """Scores candidate generations with a per-run cache of identical specs.

    Evaluation is deterministic in (config, canonical spec), so a cached
    report is exactly what re-evaluation would produce.
    """

    def __init__(self, payload, config: EvalConfig, workers: int = 1):
        self.payload = payload
        self.config = config
        self.workers = max(1, workers)
        self.cache: dict[str, CandidateReport] = {}
        self.timings: list[dict] = []
        if config.track == "classifier":
            self.context = {"input_shape": payload.input_shape, "num_classes": payload.num_classes}
        else:
            self.context = {}

    def with_payload(self, payload) -> "Evaluator":
        other = Evaluator(payload, self.config, self.workers)
        other.timings = self.timings
        return other

    def evaluate(self, texts: Sequence[str]) -> list[CandidateReport]:
        keys = [canonical_key(_as_text(t), self.config, **self.context) for t in texts]
        todo = {}
        for key, text in zip(keys, texts):
            if key not in self.cache and key not in todo:
                todo[key] = _as_text(text)
        jobs = [(self.config.track, text, self.payload, self.config) for text in todo.values()]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                fresh = list(pool.map(_evaluate_one, jobs))
        else:
            fresh = [_evaluate_one(job) for job in jobs]
        for key, report in zip(todo, fresh):
            self.cache[key] = report
            self.timings.append({"key": key, "wall_time": report.wall_time})
        out = []
        for i, (key, text) in enumerate(zip(keys, texts)):
            out.append(replace(self.cache[key], candidate_text=_as_text(text), index=i, loss_curve=list(self.cache[key].loss_curve)))
        return out
